import json

import numpy as np
import pytest
import yaml

from dacbio.cli import main


def _ok(capsys):
    out = capsys.readouterr().out.strip().splitlines()[-1]
    record = json.loads(out)
    assert record["status"] == "ok"
    return record


def test_generate_train_infer_evaluate_report(tmp_path, capsys):
    (tmp_path / "data.yaml").write_text(yaml.safe_dump({"counts": {"he_train": 4, "lc_train": 2, "lc_test": 2},
                                                        "seed": 5}))
    assert main(["generate", "--config", str(tmp_path / "data.yaml"), "--out", str(tmp_path / "d")]) == 0
    assert _ok(capsys)["counts"] == {"he_train": 4, "lc_train": 2, "lc_test": 2}

    (tmp_path / "run.yaml").write_text(yaml.safe_dump({"variant": "2", "epochs": 1, "lr_milestones": [],
                                                       "input_shape": [64, 64], "sigma": 1.0}))
    assert main(["train", "--config", str(tmp_path / "run.yaml"), "--data", str(tmp_path / "d"),
                 "--out", str(tmp_path / "r")]) == 0
    ckpt = _ok(capsys)["checkpoint"]
    assert (tmp_path / "r" / "metrics.csv").is_file()

    image = tmp_path / "d" / "lc_test" / "lc_test_00006.png"
    code = main(["infer", "--checkpoint", ckpt, "--image", str(image), "--out", str(tmp_path / "inf"),
                 "--save-maps"])
    captured = capsys.readouterr()
    if code == 0:
        rec = json.loads(captured.out)
        assert {"hc_mm", "tcd_mm"} <= set(rec)
        assert (tmp_path / "inf" / "probmap.tif").is_file()
    else:
        # an undertrained net may find no skull; that must surface as a structured error
        assert json.loads(captured.err)["status"] == "error"

    assert main(["evaluate", "--checkpoint", ckpt, "--data", str(tmp_path / "d"), "--split", "test",
                 "--out", str(tmp_path / "ev")]) == 0
    summary = _ok(capsys)
    assert summary["n"] == 2 and summary["variant"] == "2"
    assert (tmp_path / "ev" / "per_sample.csv").is_file()

    assert main(["report", "--inputs", str(tmp_path / "ev"), "--out", str(tmp_path / "rep")]) == 0
    assert "Variant" in capsys.readouterr().out
    assert (tmp_path / "rep" / "box_hc.png").is_file()


def test_infer_scales_spacing_to_network_resolution(tiny_checkpoint, tmp_path, capsys, monkeypatch):
    from PIL import Image

    from dacbio.biometry import gaussian_target
    from dacbio.estimator import DACSegmenter

    # a perfect 64x64 prediction: circle of radius 20 px, keypoints 10 px apart
    yy, xx = np.mgrid[0:64, 0:64]
    skull = ((xx - 32) ** 2 + (yy - 32) ** 2 <= 20**2).astype(np.float32)
    p = np.concatenate([skull[None], gaussian_target([(32, 27), (32, 37)], 1.0, (64, 64))])
    monkeypatch.setattr(DACSegmenter, "predict_proba", lambda self, X: p[None])
    path = tmp_path / "img.png"
    Image.fromarray(np.zeros((128, 256), np.uint16)).save(path)
    assert main(["infer", "--checkpoint", str(tiny_checkpoint), "--image", str(path),
                 "--spacing", "0.1", "0.1"]) == 0
    rec = _ok(capsys)
    # network pixels are 0.4 mm wide and 0.2 mm tall
    assert rec["tcd_mm"] == pytest.approx(10 * 0.2)
    assert rec["spacing"] == pytest.approx([0.4, 0.2])


@pytest.mark.parametrize("argv", [
    ["train", "--config", "/nonexistent.yaml", "--data", "/nowhere", "--out", "/tmp/x"],
    ["evaluate", "--checkpoint", "/nonexistent.pt", "--data", "/nowhere", "--out", "/tmp/x"],
])
def test_errors_exit_nonzero_with_json(argv, capsys):
    assert main(argv) == 1
    record = json.loads(capsys.readouterr().err)
    assert record["status"] == "error" and record["command"] == argv[0]


def test_infer_without_spacing(tiny_checkpoint, tmp_path, capsys):
    from PIL import Image

    path = tmp_path / "bare.png"
    Image.fromarray(np.zeros((64, 64), np.uint8)).save(path)
    assert main(["infer", "--checkpoint", str(tiny_checkpoint), "--image", str(path)]) == 1
    assert "spacing" in json.loads(capsys.readouterr().err)["message"]


def test_generate_rejects_zero_test_split(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("counts: {lc_test: 0}\n")
    assert main(["generate", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "d")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "PhantomConfigError"
