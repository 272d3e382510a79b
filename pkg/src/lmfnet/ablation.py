"""Ablation runner: train and evaluate several model variants under one seed and budget."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import load_samples, resolve_stats, split_ids, read_manifest
from .inference import evaluate_run
from .metrics import format_table
from .model import LMFNet
from .training import train_run

DEFAULT_MODES = ("unimodal:rgb", "unimodal:nirrg", "cat_only", "mffr_only", "mfsaf_only", "full")


def run_ablation(cfg, root, modes=DEFAULT_MODES, seeds=(0,), out_dir=None, log=None) -> dict:
    """Train every mode for every seed on the train split; evaluate on the test split.

    Each variant uses ``cfg.train`` unchanged apart from the seed, so schedules
    and step budgets match across variants. Returns ``{"runs": {mode: {seed:
    report}}, "mean": {mode: report-averages}, "table": str}``.
    """
    manifest = read_manifest(root)
    names = manifest["class_names"]
    train_ids, test_ids = split_ids(root, "train"), split_ids(root, "test")
    stats = resolve_stats(root, cfg.modalities, train_ids)
    train = load_samples(root, cfg.modalities, train_ids, stats)
    test = load_samples(root, cfg.modalities, test_ids, stats)
    runs: dict[str, dict[int, dict]] = {}
    for mode in modes:
        mcfg = cfg.with_mode(mode)
        runs[mode] = {}
        for seed in seeds:
            tcfg = type(cfg.train)(**{**mcfg.train.to_dict(), "seed": seed})
            model = LMFNet(mcfg.model_config(), seed=seed)
            run_dir = None if out_dir is None else Path(out_dir) / mode.replace(":", "_") / f"seed{seed}"
            train_run(model, train, tcfg, run_dir, meta={"mode": mode})
            report = evaluate_run(model, test, cfg.eval.patch, cfg.eval.stride, names)
            runs[mode][seed] = report
            if log is not None:
                log(f"{mode} seed {seed}: mIoU {100 * report['mIoU']:.2f}")
    mean = {}
    for mode, by_seed in runs.items():
        reps = list(by_seed.values())
        mean[mode] = {
            "iou": {n: float(np.mean([r["iou"][n] for r in reps])) for n in names},
            **{k: float(np.mean([r[k] for r in reps])) for k in ("mF1", "mIoU", "OA")},
            "params": reps[0]["params"],
        }
    result = {"runs": runs, "mean": mean, "table": format_table(mean, names)}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        serial = {"runs": {m: {str(s): r for s, r in v.items()} for m, v in runs.items()}, "mean": mean}
        (Path(out_dir) / "ablation.json").write_text(json.dumps(serial, indent=1))
        (Path(out_dir) / "ablation.txt").write_text(result["table"] + "\n")
    return result
