import json

import numpy as np
import pytest
from PIL import Image

from cosimnet import cli
from cosimnet.errors import DivergenceError


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["-q", "synth", "--out", str(root / "data"), "--count", "6", "--size", "16", "16",
                     "--seed", "2"]) == 0
    return root


@pytest.fixture(scope="module")
def checkpoint(workdir):
    ckpt = workdir / "m.ckpt"
    rc = cli.main(["-q", "train", "--data", str(workdir / "data"), "--out", str(ckpt), "--epochs", "1",
                   "--history", str(workdir / "h.csv"), "--val-fraction", "0.5"])
    assert rc == 0
    return ckpt


def test_synth_is_reproducible(tmp_path, workdir):
    assert cli.main(["-q", "synth", "--out", str(tmp_path / "again"), "--count", "6", "--size", "16", "16",
                     "--seed", "2"]) == 0
    for sub in ("t0", "t1", "mask"):
        for f in sorted((workdir / "data" / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / "again" / sub / f.name).read_bytes()


def test_infer_writes_pngs(tmp_path, workdir, checkpoint):
    t0 = sorted((workdir / "data" / "t0").iterdir())[0]
    t1 = workdir / "data" / "t1" / t0.name
    rc = cli.main(["-q", "infer", "--ckpt", str(checkpoint), "--t0", str(t0), "--t1", str(t1),
                   "--out-map", str(tmp_path / "map.png"), "--out-mask", str(tmp_path / "mask.png"),
                   "--thresholds", "0.3,0.3,0.3"])
    assert rc == 0
    heat = np.asarray(Image.open(tmp_path / "map.png"))
    mask = np.asarray(Image.open(tmp_path / "mask.png"))
    assert heat.shape == mask.shape == (16, 16)
    assert set(np.unique(mask)) <= {0, 255}
    # the heat map is quantised, so only compare away from the threshold
    cut = 0.3 * 255
    assert np.all(mask[heat > cut + 1] == 255) and np.all(mask[heat < cut - 1] == 0)


def test_eval_report_and_pr_csv(tmp_path, workdir, checkpoint):
    rc = cli.main(["-q", "eval", "--ckpt", str(checkpoint), "--data", str(workdir / "data"),
                   "--report", str(tmp_path / "r.json"), "--pr-csv", str(tmp_path / "pr.csv"),
                   "--n-thresholds", "11"])
    assert rc == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert 0.0 <= report["best_f"] <= 1.0
    lines = (tmp_path / "pr.csv").read_text().splitlines()
    assert lines[0] == "threshold,precision,recall" and len(lines) == 12


def test_contrast_and_export(tmp_path, workdir, checkpoint):
    assert cli.main(["-q", "contrast", "--history", str(workdir / "h.csv"), "--out", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "epoch,layer,metric,value"
    rc = cli.main(["-q", "export-features", "--ckpt", str(checkpoint), "--data", str(workdir / "data"),
                   "--level", "3", "--samples", "2", "--out", str(tmp_path / "f.csv")])
    assert rc == 0
    assert len((tmp_path / "f.csv").read_text().splitlines()) == 1 + 6 * 2 * 2


def test_config_file_with_flag_override(tmp_path, workdir):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("# quick run\nepochs = 1\nlr=0.0\nlr-head=0.0\nloss=tcl\ntau=0.2\n", encoding="utf-8")
    args = cli.apply_config(cli.build_parser(), ["train", "--config", str(cfg), "--data", "d",
                                                 "--out", "o", "--tau", "0.1"])
    assert (args.epochs, args.lr, args.lr_head, args.loss, args.tau) == (1, 0.0, 0.0, "tcl", 0.1)


def test_required_flags_from_config(tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text(f"out={tmp_path / 'from_cfg'}\ncount=2\nsize=16 16\n", encoding="utf-8")
    assert cli.main(["-q", "synth", "--config", str(cfg)]) == 0
    assert len(list((tmp_path / "from_cfg" / "t0").iterdir())) == 2


def test_config_unknown_key_is_usage_error(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("nonsense=3\n", encoding="utf-8")
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2


@pytest.mark.parametrize("argv", [["train"], ["synth", "--out", "x", "--size", "30", "32"],
                                  ["train", "--data", "d", "--out", "o", "--loss", "hinge"]])
def test_usage_errors(tmp_path, argv):
    argv = [a if a != "x" else str(tmp_path / "x") for a in argv]
    assert cli.main(argv) == 2


def test_missing_data_is_data_error(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 3


def test_divergence_exit_code(tmp_path, workdir, monkeypatch):
    def boom(*args, **kwargs):
        raise DivergenceError("loss became nan at epoch 1, batch 1")

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["-q", "train", "--data", str(workdir / "data"), "--out", str(tmp_path / "o")]) == 4
