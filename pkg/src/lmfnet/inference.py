"""Sliding-window prediction, dataset evaluation and fusion-stage feature export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import save_arrays
from .errors import ConfigError, DataError
from .metrics import ConfusionMatrix, metrics_report
from .preprocess import tile_raster

FEATURE_STAGES = ("pre_fusion", "post_reproject", "post_mffr", "post_mfsaf", "post_residual", "post_merge")


@dataclass
class Prediction:
    classes: np.ndarray  # (H, W) uint8
    logits: np.ndarray  # (num_classes, H, W) averaged logits
    coverage: np.ndarray  # (H, W) number of windows covering each pixel


def _ordered_planes(model, planes) -> list[np.ndarray]:
    if isinstance(planes, dict):
        missing = [m for m in model.modalities if m not in planes]
        if missing:
            raise DataError(f"raster lacks modalities {missing}")
        return [np.asarray(planes[m]) for m in model.modalities]
    return [np.asarray(p) for p in planes]


def sliding_window_predict(model, planes, patch: int, stride: int, batch_size: int = 8) -> Prediction:
    """Predict a raster of any size >= ``patch`` by averaging logits of overlapping windows."""
    arrays = _ordered_planes(model, planes)
    H, W = arrays[0].shape[1:]
    if any(a.shape[1:] != (H, W) for a in arrays):
        raise DataError("modality planes disagree on raster geometry")
    if H < patch or W < patch:
        raise DataError(f"raster {H}x{W} smaller than patch {patch}")
    origins = tile_raster((H, W), patch, stride)
    C = model.cfg.decoder.num_classes
    canvas = np.zeros((C, H, W), dtype=np.float64)
    coverage = np.zeros((H, W), dtype=np.int64)
    model.eval()
    with T.no_grad():
        for start in range(0, len(origins), batch_size):
            chunk = origins[start : start + batch_size]
            inputs = [
                np.stack([a[:, r : r + patch, c : c + patch] for r, c in chunk]).astype(np.float32) for a in arrays
            ]
            logits = model(inputs).data
            for (r, c), lg in zip(chunk, logits):
                canvas[:, r : r + patch, c : c + patch] += lg
                coverage[r : r + patch, c : c + patch] += 1
    avg = (canvas / coverage).astype(np.float32)
    return Prediction(avg.argmax(axis=0).astype(np.uint8), avg, coverage)


def evaluate_run(model, samples, patch: int, stride: int, class_names=None, ignore_label: int = 255) -> dict:
    """Confusion over all samples -> report with per-class IoU, mF1, mIoU, OA and parameter count."""
    C = model.cfg.decoder.num_classes
    if class_names is not None and len(class_names) != C:
        raise DataError(f"model predicts {C} classes, dataset declares {len(class_names)}")
    cm = ConfusionMatrix(C, ignore_label)
    for s in samples:
        pred = sliding_window_predict(model, s.planes, patch, stride)
        cm.accumulate(s.label, pred.classes)
    report = metrics_report(cm, class_names, params=model.num_parameters())
    report["confusion"] = cm.counts.tolist()
    return report


def stage_features(model, sample, stage: str) -> list[tuple[str, str, np.ndarray]]:
    """(block name, modality identity, (C, h, w) array) for every level and modality block."""
    if stage not in FEATURE_STAGES:
        raise ConfigError(f"unknown feature stage {stage!r}; choose from {FEATURE_STAGES}")
    planes = _ordered_planes(model, sample.planes if hasattr(sample, "planes") else sample)
    inputs = [p[None].astype(np.float32) for p in planes]
    model.eval()
    out = []
    with T.no_grad():
        if stage == "pre_fusion":
            pyramids = model.encoder.extract_pyramid([T.as_tensor(x) for x in inputs])
            for lvl in range(4):
                for name, pyr in zip(model.modalities, pyramids):
                    out.append((f"level{lvl}.{name}", name, pyr[lvl].data[0]))
            return out
        if model.fusion is None:
            raise ConfigError(f"stage {stage!r} needs a fusion module; mode {model.cfg.ablation_mode!r} has none")
        for lvl, stages in enumerate(model.fusion_stages(inputs)):
            if stage not in stages:
                raise ConfigError(f"stage {stage!r} is absent in mode {model.cfg.ablation_mode!r}")
            data = stages[stage].data[0]
            if stage == "post_merge":
                out.append((f"level{lvl}.fused", "fused", data))
                continue
            for k in range(data.shape[-1]):
                out.append((f"level{lvl}.hidden{k}", f"hidden{k}", np.ascontiguousarray(data[..., k])))
    return out


def export_features(model, sample, stage: str, path) -> list[str]:
    """Write a stage's per-level, per-modality feature blocks as a float32 array bundle."""
    blocks = stage_features(model, sample, stage)
    arrays = {name: arr.astype(np.float32) for name, _, arr in blocks}
    meta = {
        "stage": stage,
        "tile": getattr(sample, "tile_id", ""),
        "modality": {name: ident for name, ident, _ in blocks},
    }
    save_arrays(path, arrays, meta)
    return list(arrays)
