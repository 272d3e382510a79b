import json
import subprocess
import sys

import numpy as np
import pytest

from lmfnet import config as C
from lmfnet.checkpoint import load_arrays
from lmfnet.cli import main
from lmfnet.config import EvalConfig, ExperimentConfig
from lmfnet.raster import read_raster
from lmfnet.training import TrainConfig


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synthetic", "--out", str(root / "data"), "--tiles", "3", "--size", "64", "--test-tiles", "1", "--seed", "2"]) == 0
    cfg = ExperimentConfig.tiny(train=TrainConfig(max_iters=3, warmup_steps=1, patch=32, batch_size=1), eval=EvalConfig(32, 32))
    C.save_config(root / "tiny.yaml", cfg)
    return root


def run(*args):
    return main([str(a) for a in args])


def test_end_to_end(workspace, capsys):
    data, cfg = workspace / "data", workspace / "tiny.yaml"
    assert run("stats", "--data", data, "--config", cfg) == 0
    assert set(json.loads((data / "stats.json").read_text())) == {"rgb", "nirrg"}
    assert run("train", "--data", data, "--config", cfg, "--out", workspace / "run") == 0
    ckpt = workspace / "run" / "final.ckpt"
    assert ckpt.exists() and (workspace / "run" / "config.yaml").exists()

    capsys.readouterr()
    assert run("eval", "--data", data, "--checkpoint", ckpt, "--out", workspace / "eval") == 0
    table = capsys.readouterr().out
    assert "mIoU" in table and "bridge" in table
    report = json.loads((workspace / "eval" / "metrics.json").read_text())
    assert {"iou", "mF1", "mIoU", "OA", "params"} <= set(report)

    assert run("predict", "--data", data, "--checkpoint", ckpt, "--out", workspace / "pred", "--stride", "16") == 0
    classes = read_raster(workspace / "pred" / "tile0002_classes")
    assert classes.values.dtype == np.uint8 and classes.values.shape == (1, 64, 64)
    assert (workspace / "pred" / "tile0002_classes.png").exists()

    out = workspace / "feat" / "f.bundle"
    assert run("export-features", "--data", data, "--checkpoint", ckpt, "--stage", "post_mfsaf", "--out", out) == 0
    arrays, meta = load_arrays(out)
    assert meta["stage"] == "post_mfsaf" and len(arrays) == sum(ExperimentConfig().fusion.hidden_modalities)


def test_preprocess_and_resume(workspace):
    data, cfg = workspace / "data", workspace / "tiny.yaml"
    assert run("preprocess", "--data", data, "--config", cfg, "--out", workspace / "pre", "--split", "all") == 0
    assert read_raster(workspace / "pre" / "tile0001" / "dsm").bands == 3
    assert (workspace / "pre" / "tile0000" / "rgb.png").exists()
    assert run("train", "--data", data, "--config", cfg, "--out", workspace / "r1", "--steps", "2") == 0
    assert run("train", "--data", data, "--config", cfg, "--out", workspace / "r1", "--checkpoint", workspace / "r1" / "final.ckpt") == 0
    _, meta = load_arrays(workspace / "r1" / "final.ckpt")
    assert meta["step"] == 3


def test_params_command(capsys):
    assert run("params") == 0
    counts = json.loads(capsys.readouterr().out)
    assert counts["total"] == counts["encoder"] + counts["fusion"] + counts["decoder"]


def test_ablate_command(workspace):
    data, cfg = workspace / "data", workspace / "tiny.yaml"
    assert run("ablate", "--data", data, "--config", cfg, "--out", workspace / "abl", "--modes", "unimodal:rgb,full", "--seeds", "0") == 0
    assert "unimodal:rgb" in (workspace / "abl" / "ablation.txt").read_text()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the last case overflows on purpose
def test_exit_codes(workspace, tmp_path):
    data = workspace / "data"
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {max_iters: 5, warmup_steps: 9}\n")
    assert run("params", "--config", bad) == 2
    assert run("gen-synthetic", "--out", tmp_path / "g", "--size", "50") == 2
    assert run("eval", "--data", tmp_path / "none", "--checkpoint", workspace / "run" / "final.ckpt") == 3
    assert run("export-features", "--data", data, "--checkpoint", workspace / "run" / "final.ckpt", "--stage", "nope", "--out", tmp_path / "x") == 2
    blow = ExperimentConfig.tiny(train=TrainConfig(lr_init=1e30, max_iters=5, warmup_steps=0, patch=32, batch_size=1))
    C.save_config(tmp_path / "blow.yaml", blow)
    assert run("train", "--data", data, "--config", tmp_path / "blow.yaml", "--out", tmp_path / "blow") == 4


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "lmfnet", "params", "--config", str(tmp_path / "missing.yaml")], capture_output=True, text=True)
    assert res.returncode == 2 and "error:" in res.stderr
