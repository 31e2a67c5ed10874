import csv
import io
import json

import numpy as np
import pytest

from ctnet.checkpoint import Checkpoint, save_checkpoint
from ctnet.cli import main
from ctnet.config import ModelConfig
from ctnet.data import synthetic_image
from ctnet.imageio import load_image, quantize, save_image
from ctnet.model import init_params, params_to_numpy, zero_params


@pytest.fixture
def image_dir(tmp_path):
    d = tmp_path / "imgs"
    d.mkdir()
    for i in range(3):
        save_image(synthetic_image(24 + i, 20, seed=i), d / f"im{i}.pgm")
    return d


def _ckpt(path, cfg, zero=False):
    params = zero_params(cfg) if zero else init_params(cfg, 1)
    save_checkpoint(path, Checkpoint(cfg, params_to_numpy(params)))
    return path


def test_train_tiny_writes_outputs(tmp_path, image_dir, capsys):
    out = tmp_path / "run"
    code = main(["train", "--tiny", "--data", str(image_dir), "--out", str(out), "--sigma", "25",
                 "--steps", "2", "--epochs", "2", "--seed", "3"])
    assert code == 0
    assert (out / "checkpoint.ctnt").exists()
    log = (out / "metrics.csv").read_text().splitlines()
    assert log[0] == "epoch,step,lr,loss,val_psnr" and len(log) >= 2
    run = json.loads((out / "run_config.json").read_text())
    assert run["train"]["seed"] == 3 and run["model"]["width"] == 8
    assert run["noise"] == {"mode": "fixed", "sigma": 25.0, "sigma_min": 0.0, "sigma_max": 55.0,
                            "seed": 0, "clip": False}


def test_train_blind_range(tmp_path, image_dir):
    out = tmp_path / "run"
    assert main(["train", "--tiny", "--data", str(image_dir), "--out", str(out), "--blind", "0", "55",
                 "--steps", "1"]) == 0
    noise = json.loads((out / "run_config.json").read_text())["noise"]
    assert noise["mode"] == "blind" and (noise["sigma_min"], noise["sigma_max"]) == (0, 55)


def test_train_config_file_and_override(tmp_path, image_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"width": 8, "window": 4, "heads": 2},
                               "train": {"patch_size": 16, "epochs": 1, "halving_epochs": []},
                               "data": str(image_dir)}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"), "--steps", "1",
                 "--seed", "9"]) == 0
    assert json.loads((tmp_path / "o" / "run_config.json").read_text())["train"]["seed"] == 9


def test_train_missing_manifest_exit_3(tmp_path, capsys):
    code = main(["train", "--tiny", "--data", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
    assert code == 3
    assert "not found" in capsys.readouterr().err


def test_train_empty_dir_exit_3(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["train", "--tiny", "--data", str(tmp_path / "empty"), "--out", str(tmp_path)]) == 3


def test_bad_config_exit_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"model": {"colour": 3}}')
    assert main(["train", "--config", str(cfg)]) == 2


def test_denoise_zero_checkpoint_is_identity(tmp_path):
    ck = _ckpt(tmp_path / "z.ctnt", ModelConfig.tiny(), zero=True)
    img = synthetic_image(13, 9, seed=4)  # not a multiple of the window
    save_image(img, tmp_path / "in.pgm")
    assert main(["denoise", "--ckpt", str(ck), "--in", str(tmp_path / "in.pgm"),
                 "--out", str(tmp_path / "out.png")]) == 0
    assert np.array_equal(quantize(load_image(tmp_path / "out.png")), quantize(img))


def test_denoise_with_sigma_reports_psnr(tmp_path, capsys):
    ck = _ckpt(tmp_path / "z.ctnt", ModelConfig.tiny(), zero=True)
    save_image(synthetic_image(8, 8, seed=4), tmp_path / "in.pgm")
    assert main(["denoise", "--ckpt", str(ck), "--in", str(tmp_path / "in.pgm"),
                 "--out", str(tmp_path / "out.pgm"), "--sigma", "25"]) == 0
    assert "denoised PSNR" in capsys.readouterr().out


def test_denoise_channel_mismatch_exit_2(tmp_path):
    ck = _ckpt(tmp_path / "g.ctnt", ModelConfig.tiny())
    save_image(synthetic_image(8, 8, channels=3), tmp_path / "c.ppm")
    assert main(["denoise", "--ckpt", str(ck), "--in", str(tmp_path / "c.ppm"),
                 "--out", str(tmp_path / "o.ppm")]) == 2


def test_denoise_corrupt_checkpoint_exit_2(tmp_path):
    (tmp_path / "bad.ctnt").write_bytes(b"CTNT" + bytes(30))
    save_image(synthetic_image(8, 8), tmp_path / "in.pgm")
    assert main(["denoise", "--ckpt", str(tmp_path / "bad.ctnt"), "--in", str(tmp_path / "in.pgm"),
                 "--out", str(tmp_path / "o.pgm")]) == 2


def test_eval_nine_rows_order_and_determinism(tmp_path, image_dir, monkeypatch):
    ck = _ckpt(tmp_path / "m.ctnt", ModelConfig.tiny())
    args = ["eval", "--ckpt", str(ck), "--dataset", str(image_dir), "--sigmas", "50,15,25"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    monkeypatch.setenv("CTNET_THREADS", "2")
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.reader(io.StringIO(a.decode())))
    assert len(rows) == 10
    assert [r[1] for r in rows[1:]] == ["50"] * 3 + ["15"] * 3 + ["25"] * 3
    assert rows[1][0] == "imgs"


def test_eval_bad_sigmas_exit_2(tmp_path, image_dir):
    ck = _ckpt(tmp_path / "m.ctnt", ModelConfig.tiny())
    assert main(["eval", "--ckpt", str(ck), "--dataset", str(image_dir), "--sigmas", "15,x"]) == 2


def test_inspect_published_reference(capsys):
    assert main(["inspect", "--config", "full"]) == 0
    out = capsys.readouterr().out
    assert "49.03M" in out and "1,155,139" in out
    assert "3x3-patch tokens" in out


def test_gradcheck_tiny_passes(capsys):
    assert main(["gradcheck", "--config", "tiny", "--coords", "30"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_failure_exit_1(capsys):
    assert main(["gradcheck", "--config", "tiny", "--coords", "5", "--tol", "1e-30"]) == 1


def test_cka_two_image_probe(tmp_path, image_dir):
    ck = _ckpt(tmp_path / "m.ctnt", ModelConfig.tiny())
    probe = tmp_path / "probe"
    probe.mkdir()
    for f in sorted(image_dir.iterdir())[:2]:
        (probe / f.name).write_bytes(f.read_bytes())
    out = tmp_path / "cka"
    assert main(["cka", "--ckpt", str(ck), "--images", str(probe), "--out", str(out)]) == 0
    rows = list(csv.reader(io.StringIO((out / "cka_matrix.csv").read_text())))
    n = len(rows) - 1
    assert n > 10 and all(len(r) == n + 1 for r in rows)
    assert (out / "cka_heatmap.pgm").read_bytes().startswith(b"P5")
    assert len((out / "cka_ratios.csv").read_text().splitlines()) == n + 1
