"""Command-line driver.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .ablation import DEFAULT_MODES, run_ablation
from .data import (
    STATS_FILE,
    compute_modality_stats,
    load_sample,
    load_samples,
    read_manifest,
    resolve_stats,
    save_stats,
    split_ids,
)
from .errors import ConfigError, LMFNetError
from .inference import FEATURE_STAGES, evaluate_run, export_features, sliding_window_predict
from .metrics import format_table, report_json
from .model import LMFNet, count_parameters
from .preprocess import modality_plane
from .raster import RasterPlane, class_map_preview, read_raster, save_png, write_raster
from .synthetic import SyntheticSpec, gen_synthetic
from .training import load_checkpoint, train_run


def _config(args) -> C.ExperimentConfig:
    if getattr(args, "config", None):
        cfg = C.load_config(args.config)
    elif getattr(args, "checkpoint", None):
        _, _, meta = load_checkpoint(args.checkpoint)
        if "config" not in meta:
            raise ConfigError("checkpoint carries no configuration; pass --config")
        cfg = C.from_dict(meta["config"])
    else:
        cfg = C.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    return cfg


def _model(cfg: C.ExperimentConfig, checkpoint=None) -> LMFNet:
    model = LMFNet(cfg.model_config(), seed=cfg.train.seed)
    if checkpoint is not None:
        load_checkpoint(checkpoint, model)
    return model.eval()


def _out(args) -> Path:
    if not args.out:
        raise ConfigError(f"{args.command} needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_synthetic(args) -> None:
    spec = SyntheticSpec(tiles=args.tiles, size=args.size, seed=args.seed or 0, test_tiles=args.test_tiles)
    manifest = gen_synthetic(_out(args), spec)
    print(f"wrote {len(manifest['tiles'])} tiles to {args.out}")


def cmd_stats(args) -> None:
    cfg = _config(args)
    stats = compute_modality_stats(args.data, cfg.modalities, split_ids(args.data, args.split))
    path = Path(args.out) if args.out else Path(args.data) / STATS_FILE
    save_stats(path, stats)
    print(json.dumps({k: v.to_dict() for k, v in stats.items()}, indent=1))


def cmd_preprocess(args) -> None:
    cfg = _config(args)
    out = _out(args)
    stats = resolve_stats(args.data, cfg.modalities)
    for tile in split_ids(args.data, args.split):
        sample = load_sample(args.data, cfg.modalities, tile, stats)
        for m in cfg.modalities:
            write_raster(out / tile / m.name, RasterPlane(sample.planes[m.name]))
            raw = read_raster(Path(args.data) / m.source.format(tile=tile))
            save_png(out / tile / f"{m.name}.png", np.clip(modality_plane(m.recipe, raw).values, 0, 1))
    print(f"preprocessed tiles written to {out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    if args.steps is not None:
        cfg.train.max_iters = args.steps
        cfg.train.warmup_steps = min(cfg.train.warmup_steps, args.steps - 1)
    out = _out(args)
    C.save_config(out / "config.yaml", cfg)
    stats = resolve_stats(args.data, cfg.modalities)
    save_stats(out / STATS_FILE, stats)
    samples = load_samples(args.data, cfg.active_modalities(), split_ids(args.data, "train"), stats)
    model = LMFNet(cfg.model_config(), seed=cfg.train.seed)
    res = train_run(model, samples, cfg.train, out, resume=args.checkpoint, meta={"config": C.to_dict(cfg)})
    print(f"trained to step {res.step}; final loss {res.losses[-1]:.4f}; checkpoint {res.checkpoint}")


def _eval_stats(args, cfg):
    if args.checkpoint:
        p = Path(args.checkpoint).parent / STATS_FILE
        if p.exists():
            from .data import load_stats

            return load_stats(p)
    return resolve_stats(args.data, cfg.modalities)


def cmd_eval(args) -> None:
    cfg = _config(args)
    model = _model(cfg, args.checkpoint)
    stats = _eval_stats(args, cfg)
    names = read_manifest(args.data)["class_names"]
    samples = load_samples(args.data, cfg.active_modalities(), split_ids(args.data, args.split), stats)
    report = evaluate_run(model, samples, args.patch or cfg.eval.patch, args.stride or cfg.eval.stride, names)
    table = format_table({cfg.ablation_mode: report}, names)
    if args.out:
        out = _out(args)
        (out / "metrics.json").write_text(report_json(report))
        (out / "metrics.txt").write_text(table + "\n")
    print(table)


def cmd_predict(args) -> None:
    cfg = _config(args)
    model = _model(cfg, args.checkpoint)
    stats = _eval_stats(args, cfg)
    out = _out(args)
    tiles = [args.tile] if args.tile else split_ids(args.data, args.split)
    for tile in tiles:
        sample = load_sample(args.data, cfg.active_modalities(), tile, stats)
        pred = sliding_window_predict(model, sample.planes, args.patch or cfg.eval.patch, args.stride or cfg.eval.stride)
        write_raster(out / f"{tile}_classes", RasterPlane(pred.classes), dtype="uint8")
        save_png(out / f"{tile}_classes.png", class_map_preview(pred.classes))
    print(f"wrote {len(tiles)} class maps to {out}")


def cmd_ablate(args) -> None:
    cfg = _config(args)
    modes = args.modes.split(",") if args.modes else DEFAULT_MODES
    seeds = tuple(int(s) for s in args.seeds.split(","))
    res = run_ablation(cfg, args.data, modes, seeds, _out(args), log=print)
    print(res["table"])


def cmd_params(args) -> None:
    cfg = _config(args)
    counts = count_parameters(cfg.model_config())
    print(json.dumps(counts, indent=1))


def cmd_export_features(args) -> None:
    cfg = _config(args)
    if args.stage not in FEATURE_STAGES:
        raise ConfigError(f"unknown stage {args.stage!r}; choose from {FEATURE_STAGES}")
    model = _model(cfg, args.checkpoint)
    stats = _eval_stats(args, cfg)
    tile = args.tile or split_ids(args.data, args.split)[0]
    sample = load_sample(args.data, cfg.active_modalities(), tile, stats)
    if not args.out:
        raise ConfigError("export-features needs --out FILE")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    names = export_features(model, sample, args.stage, args.out)
    print(f"wrote {len(names)} feature blocks to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lmfnet", description="Multimodal fusion segmentation experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text, data=True, split="train"):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=fn)
        sp.add_argument("--config", help="experiment YAML file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (or file for export-features)")
        if data:
            sp.add_argument("--data", required=True, help="dataset root (contains dataset.json)")
            sp.add_argument("--split", default=split, help="tile split: train, test or all")
        return sp

    g = command("gen-synthetic", cmd_gen_synthetic, "generate a synthetic dataset", data=False)
    g.add_argument("--tiles", type=int, default=8)
    g.add_argument("--size", type=int, default=256)
    g.add_argument("--test-tiles", type=int, default=0)
    command("stats", cmd_stats, "compute per-band dataset statistics")
    command("preprocess", cmd_preprocess, "write preprocessed modality rasters and previews")
    t = command("train", cmd_train, "train a model")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--steps", type=int, help="override train.max_iters")
    for name, fn, help_text in (
        ("eval", cmd_eval, "evaluate a checkpoint"),
        ("predict", cmd_predict, "sliding-window class maps"),
        ("export-features", cmd_export_features, "dump fusion-stage features"),
    ):
        sp = command(name, fn, help_text, split="test")
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--patch", type=int)
        sp.add_argument("--stride", type=int)
        sp.add_argument("--tile")
        if name == "export-features":
            sp.add_argument("--stage", required=True, help=f"one of {', '.join(FEATURE_STAGES)}")
    a = command("ablate", cmd_ablate, "train and compare ablation variants")
    a.add_argument("--modes", help="comma-separated modes (default: all)")
    a.add_argument("--seeds", default="0")
    sp = command("params", cmd_params, "count parameters", data=False)
    sp.add_argument("--checkpoint")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "split", None) == "all":
        args.split = None
    try:
        args.func(args)
    except LMFNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
