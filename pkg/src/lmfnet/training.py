"""Loss, AdamW with selective weight decay, warmup + poly schedule, augmentation, training loop."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .data import RasterSample
from .errors import ConfigError, DataError, NumericError
from .nn import Module
from .tensor import Tensor

IGNORE_LABEL = 255
NO_DECAY_KINDS = ("norm_scale", "norm_shift")


@dataclass
class TrainConfig:
    lr_init: float = 6e-5
    lr_warmup_start: float = 1e-6
    warmup_steps: int = 1500
    max_iters: int = 80000
    power: float = 0.9
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4
    patch: int = 512
    seed: int = 0
    flip: bool = True
    rotate: bool = True
    scale: bool = True
    scale_range: tuple[float, float] = (0.5, 2.0)
    ignore_label: int = IGNORE_LABEL
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.scale_range = tuple(float(s) for s in self.scale_range)
        if not 0 <= self.warmup_steps < self.max_iters:
            raise ConfigError(f"need 0 <= warmup_steps < max_iters, got {self.warmup_steps}, {self.max_iters}")
        if self.power <= 0:
            raise ConfigError(f"poly power must be positive, got {self.power}")
        if self.lr_init <= 0 or self.lr_warmup_start < 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patch < 32 or self.patch % 32:
            raise ConfigError(f"train.patch must be a positive multiple of 32, got {self.patch}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad scale_range {self.scale_range}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# -- schedule ---------------------------------------------------------------

def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_init`` over ``warmup_steps``, then poly decay to 0 at ``max_iters``."""
    if not 0 <= step <= cfg.max_iters:
        raise ConfigError(f"step {step} outside [0, {cfg.max_iters}]")
    t0 = cfg.warmup_steps
    if step <= t0:
        if t0 == 0:
            return cfg.lr_init
        return cfg.lr_warmup_start + (cfg.lr_init - cfg.lr_warmup_start) * step / t0
    return cfg.lr_init * (1.0 - (step - t0) / (cfg.max_iters - t0)) ** cfg.power


# -- optimiser --------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params, grads, state: AdamWState, step: int, lr: float, cfg: TrainConfig) -> None:
    """One in-place AdamW update (decoupled decay; none for norm parameters).

    ``params`` are Parameters (or objects with ``name``/``kind``/``data``),
    ``grads`` the matching arrays (None means zero). ``step`` counts from 1.
    """
    if step < 1:
        raise ConfigError("AdamW step counter starts at 1")
    b1, b2 = cfg.betas
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    for p, g in zip(params, grads):
        g = np.zeros_like(p.data) if g is None else g
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {p.name!r}")
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[p.name], state.v[p.name] = m.astype(p.dtype), v.astype(p.dtype)
        data = p.data
        if cfg.weight_decay and p.kind not in NO_DECAY_KINDS:
            data = data * p.dtype.type(1.0 - lr * cfg.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = (data - lr * update).astype(p.dtype)
    state.step = step


def cross_entropy_loss(logits: Tensor, target, ignore_label: int | None = IGNORE_LABEL) -> Tensor:
    return T.softmax_cross_entropy(logits, target, ignore_label)


# -- augmentation -----------------------------------------------------------

def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)


def _resize_plane(x: np.ndarray, h: int, w: int) -> np.ndarray:
    mh = T.bilinear_matrix(x.shape[-2], h, x.dtype)
    mw = T.bilinear_matrix(x.shape[-1], w, x.dtype)
    return mh @ x @ mw.T


def _resize_label(y: np.ndarray, h: int, w: int) -> np.ndarray:
    return y[np.ix_(_nearest_index(y.shape[0], h), _nearest_index(y.shape[1], w))]


def _fit(planes: dict, label: np.ndarray, size: tuple[int, int], rng, ignore: int):
    """Random crop, or pad (planes with 0, label with ``ignore``), to exactly ``size``."""
    H, W = label.shape
    th, tw = size
    out_planes, out_label = {}, np.full((th, tw), ignore, dtype=label.dtype)
    oy = int(rng.integers(0, H - th + 1)) if H > th else 0
    ox = int(rng.integers(0, W - tw + 1)) if W > tw else 0
    py = int(rng.integers(0, th - H + 1)) if H < th else 0
    px = int(rng.integers(0, tw - W + 1)) if W < tw else 0
    hh, ww = min(H, th), min(W, tw)
    out_label[py : py + hh, px : px + ww] = label[oy : oy + hh, ox : ox + ww]
    for k, p in planes.items():
        buf = np.zeros((p.shape[0], th, tw), dtype=p.dtype)
        buf[:, py : py + hh, px : px + ww] = p[:, oy : oy + hh, ox : ox + ww]
        out_planes[k] = buf
    return out_planes, out_label


def augment_sample(sample, rng: np.random.Generator, cfg: TrainConfig):
    """Apply one random geometric transform, shared by every modality and the label.

    Horizontal / vertical flips, rotation by a multiple of 90 degrees, and
    scaling in ``cfg.scale_range`` followed by crop or pad back to the input
    size. Planes are resampled bilinearly, labels by nearest neighbour.
    """
    planes = dict(sample.planes)
    label = sample.label
    H, W = label.shape
    if cfg.flip and rng.random() < 0.5:
        planes = {k: p[:, :, ::-1] for k, p in planes.items()}
        label = label[:, ::-1]
    if cfg.flip and rng.random() < 0.5:
        planes = {k: p[:, ::-1, :] for k, p in planes.items()}
        label = label[::-1, :]
    if cfg.rotate:
        k = int(rng.integers(4))
        planes = {n: np.rot90(p, k, axes=(1, 2)) for n, p in planes.items()}
        label = np.rot90(label, k)
    if cfg.scale:
        s = rng.uniform(*cfg.scale_range)
        h, w = max(1, int(round(label.shape[0] * s))), max(1, int(round(label.shape[1] * s)))
        planes = {n: _resize_plane(np.ascontiguousarray(p), h, w) for n, p in planes.items()}
        label = _resize_label(label, h, w)
    planes, label = _fit(planes, label, (H, W), rng, cfg.ignore_label)
    return RasterSample({k: np.ascontiguousarray(p) for k, p in planes.items()}, np.ascontiguousarray(label), sample.tile_id)


def random_crop(sample, patch: int, rng):
    H, W = sample.label.shape
    if H < patch or W < patch:
        raise DataError(f"tile {sample.tile_id} ({H}x{W}) smaller than training patch {patch}")
    y = int(rng.integers(0, H - patch + 1))
    x = int(rng.integers(0, W - patch + 1))
    planes = {k: p[:, y : y + patch, x : x + patch] for k, p in sample.planes.items()}
    return RasterSample(planes, sample.label[y : y + patch, x : x + patch], sample.tile_id)


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator: draws for a step depend only on (seed, step, stream)."""
    return np.random.default_rng([seed, step, stream])


def make_batch(samples, modalities, cfg: TrainConfig, step: int):
    rng = step_rng(cfg.seed, step)
    augment = cfg.flip or cfg.rotate or cfg.scale
    picks = []
    for _ in range(cfg.batch_size):
        s = random_crop(samples[int(rng.integers(len(samples)))], cfg.patch, rng)
        picks.append(augment_sample(s, rng, cfg) if augment else s)
    inputs = [np.stack([s.planes[m] for s in picks]).astype(np.float32) for m in modalities]
    target = np.stack([s.label for s in picks]).astype(np.int64)
    return inputs, target


# -- loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Module
    losses: list[float]
    step: int
    checkpoint: Path | None = None


def save_checkpoint(path, model: Module, state: AdamWState, meta: dict) -> None:
    arrays = {"param." + k: v for k, v in model.state_dict().items()}
    for name in state.m:
        arrays["adam.m." + name] = state.m[name]
        arrays["adam.v." + name] = state.v[name]
    save_arrays(path, arrays, {**meta, "step": state.step})


def load_checkpoint(path, model: Module | None = None) -> tuple[dict[str, np.ndarray], AdamWState, dict]:
    """Returns (parameter arrays, optimiser state, metadata); loads parameters into ``model`` if given."""
    arrays, meta = load_arrays(path)
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param.")}
    state = AdamWState(
        {k[7:]: v for k, v in arrays.items() if k.startswith("adam.m.")},
        {k[7:]: v for k, v in arrays.items() if k.startswith("adam.v.")},
        int(meta.get("step", 0)),
    )
    if model is not None:
        model.load_state_dict(params)
    return params, state, meta


def train_run(
    model: Module,
    samples,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    stop_after: int | None = None,
    monitor: Callable[[int, Module], bool] | None = None,
    meta: dict | None = None,
) -> TrainResult:
    """Train ``model`` on ``samples`` from step 0 (or from a ``resume`` checkpoint).

    Runs to ``cfg.max_iters`` or ``stop_after`` steps, whichever is first;
    ``monitor(step, model)`` returning True also stops early. Writes
    ``train_log.jsonl`` and ``final.ckpt`` into ``out_dir`` when given.
    """
    if not samples:
        raise DataError("no training samples")
    modalities = list(model.modalities)
    missing = [m for m in modalities if m not in samples[0].planes]
    if missing:
        raise DataError(f"samples lack modalities {missing}")
    state = AdamWState()
    losses: list[float] = []
    if resume is not None:
        _, state, rmeta = load_checkpoint(resume, model)
        losses = list(rmeta.get("losses", []))
    out = Path(out_dir) if out_dir is not None else None
    log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log = (out / "train_log.jsonl").open("a" if resume is not None else "w")
    end = cfg.max_iters if stop_after is None else min(cfg.max_iters, stop_after)
    params = model.parameters()
    t_last, n_last = time.perf_counter(), 0
    meta = dict(meta or {})
    step = state.step
    try:
        while step < end:
            model.train()
            lr = lr_at_step(step, cfg)
            inputs, target = make_batch(samples, modalities, cfg, step)
            model.set_dropout_rng(step_rng(cfg.seed, step, 1))
            model.zero_grad()
            loss = cross_entropy_loss(model(inputs), target, cfg.ignore_label)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {step}")
            loss.backward()
            adamw_step(params, [p.grad for p in params], state, step + 1, lr, cfg)
            losses.append(value)
            step += 1
            n_last += cfg.batch_size
            if log is not None and (step % cfg.log_every == 0 or step == end):
                now = time.perf_counter()
                rec = {"step": step, "lr": lr, "loss": value, "throughput": n_last / max(now - t_last, 1e-9)}
                log.write(json.dumps(rec) + "\n")
                log.flush()
                t_last, n_last = now, 0
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(out / "last.ckpt", model, state, {**meta, "losses": losses})
            if monitor is not None and monitor(step, model):
                break
    finally:
        if log is not None:
            log.close()
        model.eval()
    ckpt = None
    if out is not None:
        ckpt = out / "final.ckpt"
        save_checkpoint(ckpt, model, state, {**meta, "losses": losses})
    return TrainResult(model, losses, step, ckpt)
