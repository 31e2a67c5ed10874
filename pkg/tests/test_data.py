import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ctnet.config import NoiseSpec
from ctnet.data import (PatchDataset, add_awgn, augment, build_manifest, extract_patches,
                        inverse_way, keyed_rng, manifest_json, noisy_batch, patch_corners,
                        read_manifest, resolve_dataset, synthetic_image, write_manifest)
from ctnet.imageio import save_image

WAYS = range(8)


# -- augmentation ------------------------------------------------------------------

def test_way_zero_identity(rng):
    p = rng.normal(size=(3, 4, 5))
    assert np.array_equal(augment(p, 0), p)


def test_way_two_hand_rotation():
    p = np.array([[[1, 2], [3, 4]]], dtype=float)
    assert augment(p, 2)[0].tolist() == [[3, 1], [4, 2]]


@pytest.mark.parametrize("way", WAYS)
def test_inverse_restores(way, rng):
    p = rng.normal(size=(2, 5, 5))
    assert np.array_equal(augment(augment(p, way), inverse_way(way)), p)


def test_group_closure():
    base = np.arange(9.0).reshape(1, 3, 3)
    images = {w: augment(base, w) for w in WAYS}
    distinct = {im.tobytes() for im in images.values()}
    assert len(distinct) == 8
    for a, b in itertools.product(WAYS, WAYS):
        assert augment(augment(base, a), b).tobytes() in distinct


@pytest.mark.parametrize("way", [1, 3, 5, 7])
def test_flip_ways_are_involutions(way, rng):
    p = rng.normal(size=(1, 4, 4))
    assert np.array_equal(augment(augment(p, way), way), p)


def test_bad_way():
    with pytest.raises(ValueError):
        augment(np.zeros((1, 2, 2)), 8)


# -- noise ---------------------------------------------------------------------------

def test_sigma_zero_is_exact_copy(rng):
    p = rng.random((1, 6, 6))
    noisy, s = add_awgn(p, NoiseSpec(sigma=0), keyed_rng(0))
    assert s == 0 and np.array_equal(noisy, p)


def test_awgn_std_at_million_samples():
    zeros = np.zeros((1, 1000, 1000))
    noisy, _ = add_awgn(zeros, NoiseSpec(sigma=25), keyed_rng(42))
    std = noisy.std()
    assert 24.9 / 255 <= std <= 25.1 / 255
    assert abs(noisy.mean()) < 5 * (25 / 255) / 1000


def test_blind_sigma_uniform_chi_square():
    spec = NoiseSpec.blind(0, 55)
    patch = np.zeros((1, 1, 1))
    sig = np.array([add_awgn(patch, spec, keyed_rng(7, i))[1] for i in range(20_000)])
    assert sig.min() >= 0 and sig.max() <= 55
    counts, _ = np.histogram(sig, bins=11, range=(0, 55))
    assert stats.chisquare(counts).pvalue > 0.01


def test_noise_is_keyed_not_ordered(rng):
    clean = rng.random((4, 1, 4, 4))
    a, _ = noisy_batch(clean, NoiseSpec(seed=3), 1, 2)
    b, _ = noisy_batch(clean[2:], NoiseSpec(seed=3), 1, 2)
    assert np.array_equal(a, noisy_batch(clean, NoiseSpec(seed=3), 1, 2)[0])
    assert not np.array_equal(a[2:], b)  # item keys follow position in the batch
    assert np.array_equal(a[0], noisy_batch(clean[:1], NoiseSpec(seed=3), 1, 2)[0][0])


def test_clip_option():
    noisy, _ = add_awgn(np.full((1, 50, 50), 0.99), NoiseSpec(sigma=50, clip=True), keyed_rng(1))
    assert noisy.max() <= 1.0 and noisy.min() >= 0.0


# -- patches ---------------------------------------------------------------------------

def test_patch_count_and_size(rng):
    img = rng.random((1, 100, 100))
    assert extract_patches(img, 48, 108, seed=0).shape == (108, 1, 48, 48)


def test_patch_too_large():
    with pytest.raises(ValueError):
        extract_patches(np.zeros((1, 20, 30)), 48, 1, 0)


def test_corners_deterministic():
    a = patch_corners(100, 80, 16, 50, seed=4, image_id=2)
    b = patch_corners(100, 80, 16, 50, seed=4, image_id=2)
    assert np.array_equal(a, b)
    assert a[:, 0].max() <= 84 and a[:, 1].max() <= 64


@settings(max_examples=20, deadline=None)
@given(st.integers(8, 30), st.integers(8, 30), st.integers(1, 8))
def test_patches_are_crops(h, w, size):
    img = np.arange(h * w, dtype=float).reshape(1, h, w)
    corners = patch_corners(h, w, size, 5, 0)
    for (y, x), p in zip(corners, extract_patches(img, size, 5, 0)):
        assert np.array_equal(p[0], img[0, y:y + size, x:x + size])


def test_dataset_from_images():
    imgs = [synthetic_image(32, 40, seed=i) for i in range(3)]
    ds = PatchDataset.from_images(imgs, 16, 4, seed=1)
    assert len(ds) == 12 and ds.channels == 1


# -- manifests ---------------------------------------------------------------------------

def test_empty_dir_manifest(tmp_path):
    entries, bad = build_manifest([tmp_path])
    assert entries == [] and bad == []


def _fixture_dir(tmp_path, n=3):
    for i in range(n):
        save_image(synthetic_image(12 + i, 10, seed=i), tmp_path / f"img{i}.pgm")
    (tmp_path / "notes.txt").write_text("ignored")
    return tmp_path


def test_manifest_entries_and_determinism(tmp_path):
    d = _fixture_dir(tmp_path)
    entries, bad = build_manifest([d])
    assert len(entries) == 3 and bad == []
    assert entries[1]["height"] == 13 and entries[1]["channels"] == 1
    assert manifest_json(entries) == manifest_json(build_manifest([d, d])[0])
    write_manifest(entries, tmp_path / "m.json")
    first = (tmp_path / "m.json").read_bytes()
    write_manifest(build_manifest([d])[0], tmp_path / "m.json")
    assert (tmp_path / "m.json").read_bytes() == first
    assert read_manifest(tmp_path / "m.json") == entries
    assert resolve_dataset(str(tmp_path / "m.json")) == resolve_dataset(str(d))


def test_manifest_skips_corrupt(tmp_path):
    d = _fixture_dir(tmp_path, 1)
    (d / "broken.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    entries, bad = build_manifest([d])
    assert len(entries) == 1 and len(bad) == 1


def test_manifest_rejects_bad_json(tmp_path):
    (tmp_path / "m.json").write_text('{"path": 1}')
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "m.json")


def test_dataset_from_manifest_converts_color(tmp_path):
    save_image(synthetic_image(20, 20, channels=3, seed=1), tmp_path / "c.ppm")
    entries, _ = build_manifest([tmp_path])
    ds = PatchDataset.from_manifest(entries, 8, 2, channels=1)
    assert ds.clean.shape == (2, 1, 8, 8)


def test_synthetic_image_on_8bit_grid():
    img = synthetic_image(30, 20, channels=3, seed=5)
    assert img.shape == (3, 30, 20)
    assert np.array_equal(np.round(img * 255), img * 255)
    assert np.array_equal(img, synthetic_image(30, 20, channels=3, seed=5))
