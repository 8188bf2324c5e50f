import numpy as np
import pytest

from dntdf.cli import main
from dntdf.data import read_pnm


def test_count_single_ratio(capsys):
    assert main(["count", "--backbone", "resnet50", "--r", "4", "--input", "288"]) == 0
    out = capsys.readouterr().out
    assert "decoder total" in out and "5.277M" in out


def test_count_table(capsys):
    assert main(["count", "--backbone", "resnet50", "--table", "2,4,8,16,32", "--input", "288"]) == 0
    rows = [l.split() for l in capsys.readouterr().out.splitlines()[2:]]
    assert [int(r[0]) for r in rows] == [2, 4, 8, 16, 32]


def test_count_default_ratio_and_csv(capsys):
    assert main(["count", "--backbone", "efficientnet-b3", "--csv"]) == 0
    assert capsys.readouterr().out.startswith("layer,op,component")


def test_unknown_flag_exits_two(capsys):
    assert main(["count", "--backbone", "resnet50", "--frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_error_exits_one(capsys):
    assert main(["count", "--backbone", "tiny", "--r", "64", "--input", "64"]) == 1
    assert "error" in capsys.readouterr().err


def test_synth_twice_identical(tmp_path):
    assert main(["synth", "--n", "10", "--size", "64", "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--n", "10", "--size", "64", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.p?m"))
    assert len(files) == 20
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_eval_predictions_equal_masks(tmp_path, capsys):
    main(["synth", "--n", "3", "--size", "64", "--seed", "1", "--out", str(tmp_path)])
    capsys.readouterr()
    rc = main(["eval", "--predictions", str(tmp_path / "masks"), "--masks", str(tmp_path / "masks"),
               "--report", str(tmp_path / "rep.txt")])
    assert rc == 0
    text = (tmp_path / "rep.txt").read_text()
    assert "fmax: 1.000000" in text and "mae: 0.000000" in text
    assert (tmp_path / "rep.txt.pr.csv").exists()


def test_train_predict_eval_roundtrip(tmp_path, capsys):
    main(["synth", "--n", "4", "--size", "64", "--seed", "2", "--out", str(tmp_path / "d")])
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 1\ntrain_images = d/images\ntrain_masks = d/masks\nval_images = d/images\n"
                   "val_masks = d/masks\nmodel = m.npz\nreport = rep.txt\naugment = false\n")
    assert main(["train", "--config", str(cfg), "--quiet"]) == 0
    assert main(["predict", "--model", str(tmp_path / "m.npz"), "--images", str(tmp_path / "d" / "images"),
                 "--out", str(tmp_path / "pred")]) == 0
    maps = sorted((tmp_path / "pred").iterdir())
    assert len(maps) == 4
    # round trip: written maps equal round(255 P) / 255
    from dntdf.train import load_model, predict
    from dntdf.data import load_images
    g = load_model(tmp_path / "m.npz")
    probs = predict(g, [img for _, img in load_images(tmp_path / "d" / "images")])
    for path, p in zip(maps, probs):
        arr, maxval = read_pnm(path)
        np.testing.assert_array_equal(arr / maxval, np.floor(p * 255 + 0.5) / 255)
    assert main(["eval", "--model", str(tmp_path / "m.npz"), "--images", str(tmp_path / "d" / "images"),
                 "--masks", str(tmp_path / "d" / "masks")]) == 0
    assert "s_measure" in capsys.readouterr().out


def test_eval_model_requires_images(tmp_path, capsys):
    assert main(["eval", "--model", "x.npz", "--masks", str(tmp_path)]) == 1
