import json
import os

import pytest

from lmk3d.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from lmk3d.core import read_landmarks


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--count", "3", "--out", str(d / "data"), "--seed", "5"]) == EXIT_OK
    return d


def test_synth_writes_pairs(workdir):
    names = sorted(os.listdir(workdir / "data"))
    assert len([n for n in names if n.startswith("vol_")]) == 3
    assert len([n for n in names if n.startswith("lmk_")]) == 3


def test_augment_is_reproducible(workdir):
    for out, workers in (("aug1", "1"), ("aug2", "2")):
        rc = main(["augment", "--in", str(workdir / "data"), "--out", str(workdir / out), "--seed", "11", "--workers", workers])
        assert rc == EXIT_OK
    for name in os.listdir(workdir / "aug1"):
        assert (workdir / "aug1" / name).read_bytes() == (workdir / "aug2" / name).read_bytes()
    chain = json.loads(next((workdir / "aug1").glob("chain_*.json")).read_text())
    assert chain is not None


def test_train_predict_gradcam_eval(workdir, capsys):
    cfg = workdir / "run.cfg"
    cfg.write_text("epochs = 1\nchannels = 2\nval_count = 1\naugment_copies = 1\n")
    out = workdir / "model"
    assert main(["train", "--config", str(cfg), "--data", str(workdir / "data"), "--out", str(out)]) == EXIT_OK
    assert (out / "latest.ckpt").exists() and (out / "loss_log.csv").exists()
    assert "channels = 2" in (out / "config.txt").read_text()

    vol = next((workdir / "data").glob("vol_*.vlm"))
    stem = vol.name[4:-4]
    pred_dir = workdir / "pred"
    pred_dir.mkdir()
    rc = main(["predict", "--model", str(out / "latest.ckpt"), "--volume", str(vol), "--out", str(pred_dir / f"lmk_{stem}.json")])
    assert rc == EXIT_OK
    assert read_landmarks(pred_dir / f"lmk_{stem}.json").points.shape == (8, 3)

    png = workdir / "cam.png"
    rc = main(["gradcam", "--model", str(out / "latest.ckpt"), "--volume", str(vol), "--landmark", "1", "--slice", "16", "--out", str(png)])
    assert rc == EXIT_OK and png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    gt_dir = workdir / "gt"
    gt_dir.mkdir()
    (gt_dir / f"lmk_{stem}.json").write_bytes((workdir / "data" / f"lmk_{stem}.json").read_bytes())
    capsys.readouterr()
    rc = main(["eval", "--pred", str(pred_dir), "--gt", str(gt_dir), "--format", "csv", "--groups", "table1"])
    assert rc == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "subanatomy,n,mae,mae_std,rmse,rmse_std" and lines[-1].startswith("Overall,8,")


def test_exit_codes(workdir, tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["synth", "--count", "x", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["augment", "--in", str(tmp_path), "--out", str(tmp_path / "o"), "--seed", "1"]) == EXIT_DATA
    assert main(["augment", "--in", str(workdir / "data"), "--out", str(tmp_path / "o"), "--seed", "1", "--p", "0.5,0.5,0.5,0.5"]) == EXIT_USAGE
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert main(["train", "--config", str(bad), "--data", str(workdir / "data"), "--out", str(tmp_path / "m")]) == EXIT_DATA
    (tmp_path / "p").mkdir()
    (tmp_path / "p" / "lmk_9999.json").write_bytes((next((workdir / "data").glob("lmk_*.json"))).read_bytes())
    assert main(["eval", "--pred", str(tmp_path / "p"), "--gt", str(workdir / "data")]) == EXIT_DATA
    assert main(["predict", "--model", str(tmp_path / "missing.ckpt"), "--volume", "x", "--out", "y"]) == EXIT_DATA
