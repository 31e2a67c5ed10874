import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctnet.config import ModelConfig
from ctnet.data import synthetic_image
from ctnet.metrics import (DegenerateActivation, cka_matrix, cka_profile, evaluate, format_psnr,
                           linear_cka, psnr, ratios_from_matrix)
from ctnet.model import init_params, zero_params

# Linear CKA of X=[[1,2],[3,1],[0,4]] and Y=[[2,0],[1,1],[5,3]], computed with mpmath
# from tr(KHLH)/sqrt(tr(KHKH) tr(LHLH)) with K=XX^T, L=YY^T, H the centering matrix.
HAND_X = np.array([[1.0, 2.0], [3.0, 1.0], [0.0, 4.0]])
HAND_Y = np.array([[2.0, 0.0], [1.0, 1.0], [5.0, 3.0]])
HAND_CKA = 0.81580127036226248395


def _hsic_cka(x, y):
    n = len(x)
    h = np.eye(n) - np.ones((n, n)) / n
    k, l = x @ x.T, y @ y.T
    hsic = lambda a, b: np.trace(a @ h @ b @ h)  # noqa: E731
    return hsic(k, l) / math.sqrt(hsic(k, k) * hsic(l, l))


# -- PSNR ------------------------------------------------------------------------------

def test_psnr_identical_is_inf():
    a = np.random.default_rng(0).random((1, 4, 4))
    assert psnr(a, a) == math.inf and format_psnr(psnr(a, a)) == "inf"


def test_psnr_uniform_offset():
    a = np.zeros((1, 8, 8))
    assert abs(psnr(a + 16 / 255, a) - 24.0487) < 1e-3
    assert math.isclose(psnr(a + 16 / 255, a), 10 * math.log10(255 ** 2 / 256), rel_tol=1e-12)


def test_psnr_mse_equal_peak_is_zero():
    a = np.zeros((2, 3))
    assert psnr(a + 1.0, a) == 0.0
    assert psnr(a + 255.0, a, peak=255.0) == 0.0


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))


# -- evaluation --------------------------------------------------------------------------

def _images(n=3):
    return [(f"im{i}", synthetic_image(10 + i, 12, seed=i)) for i in range(n)]


def test_zero_model_equals_identity_denoiser():
    cfg = ModelConfig.tiny()
    imgs = _images(2)
    table = evaluate(zero_params(cfg), cfg, imgs, [25], "toy", seed=3)
    from ctnet.data import add_awgn, keyed_rng
    from ctnet.config import NoiseSpec
    from ctnet.imageio import quantize
    for i, (row, (_, clean)) in enumerate(zip(table.rows, imgs)):
        noisy, _ = add_awgn(clean, NoiseSpec(sigma=25), keyed_rng(3, i, 2500))
        assert row.psnr == psnr(quantize(noisy) / 255.0, clean)


def test_table_csv_format_and_order():
    cfg = ModelConfig.tiny()
    table = evaluate(init_params(cfg), cfg, _images(3), [50, 15, 25], "toy")
    rows = list(csv.reader(io.StringIO(table.to_csv())))
    assert rows[0] == ["dataset", "sigma", "image", "psnr"]
    assert len(rows) == 10
    assert [r[1] for r in rows[1::3]] == ["50", "15", "25"]
    assert set(table.averages()) == {("toy", 50.0), ("toy", 15.0), ("toy", 25.0)}


def test_threads_do_not_change_results():
    cfg = ModelConfig.tiny()
    a = evaluate(init_params(cfg), cfg, _images(2), [15, 25], "toy", threads=1)
    b = evaluate(init_params(cfg), cfg, _images(2), [15, 25], "toy", threads=3)
    assert a.to_csv() == b.to_csv()


# -- CKA ---------------------------------------------------------------------------------

def test_cka_self_similarity(rng):
    x = rng.normal(size=(50, 6))
    assert abs(linear_cka(x, x) - 1.0) < 1e-10


def test_cka_orthogonal_and_scale_invariance(rng):
    x = rng.normal(size=(40, 5))
    y = rng.normal(size=(40, 3))
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    base = linear_cka(x, y)
    assert abs(linear_cka(x @ q, y) - base) < 1e-10
    assert abs(linear_cka(3.7 * x, y) - base) < 1e-10


def test_cka_hand_example_matches_hsic_oracle():
    assert abs(linear_cka(HAND_X, HAND_Y) - HAND_CKA) < 1e-12
    assert abs(_hsic_cka(HAND_X, HAND_Y) - HAND_CKA) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 12), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_cka_feature_form_matches_hsic_form(n, p, q, seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(n, p)), r.normal(size=(n, q))
    v = linear_cka(x, y)
    assert 0 <= v <= 1 + 1e-12
    assert abs(v - _hsic_cka(x, y)) < 1e-9
    assert abs(v - linear_cka(y, x)) < 1e-12


def test_cka_degenerate():
    with pytest.raises(DegenerateActivation):
        linear_cka(np.ones((5, 2)), np.random.default_rng(0).normal(size=(5, 2)))


def test_duplicate_layers_have_cka_one(rng):
    a = rng.normal(size=(2, 3, 4, 4))
    m, deg = cka_matrix({"a": a, "b": a.copy(), "c": rng.normal(size=(2, 3, 4, 4))})
    assert deg == [] and abs(m[0, 1] - 1) < 1e-12
    np.testing.assert_allclose(m, m.T)


def test_ratios_exclude_self():
    m = np.array([[1.0, 0.5, 0.7], [0.5, 1.0, np.nan], [0.7, np.nan, 1.0]])
    r = ratios_from_matrix(m, 0.6)
    assert r.tolist() == [0.5, 1.0, 0.0]


def test_profile_consistency_trained_like_model():
    cfg = ModelConfig.tiny()
    params = init_params(cfg, 2)
    rng = np.random.default_rng(3)
    for p in params.values():
        p.data += rng.normal(0, 0.05, p.shape)
    probes = np.stack([synthetic_image(9, 10, seed=s) for s in (1, 2)])
    prof = cka_profile(params, cfg, probes)
    assert prof.matrix.shape == (len(prof.names), len(prof.names))
    np.testing.assert_array_equal(prof.ratios, ratios_from_matrix(prof.matrix, prof.threshold))
    # the emitted CSV carries enough precision to recompute the ratios
    rows = list(csv.reader(io.StringIO(prof.to_csv())))[1:]
    emitted = np.array([[float(v) for v in r[1:]] for r in rows])
    assert np.array_equal(ratios_from_matrix(emitted, 0.6), prof.ratios)
    pgm = prof.heatmap_pgm(cell=2)
    assert pgm.startswith(b"P5\n%d %d\n255\n" % (2 * len(prof.names), 2 * len(prof.names)))


def test_profile_zero_model_reports_degenerate_layers():
    cfg = ModelConfig.tiny()
    probes = np.stack([synthetic_image(8, 8, seed=s) for s in (1, 2)])
    prof = cka_profile(zero_params(cfg), cfg, probes)
    assert "O_SB" in prof.degenerate and "I_C" not in prof.degenerate
    i = prof.names.index("O_SB")
    assert np.isnan(prof.matrix[i]).all() and np.isnan(prof.ratios[i])
