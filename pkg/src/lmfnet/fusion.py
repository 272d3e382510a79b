"""Multimodal feature fusion over a stacked modality axis.

Features of one pyramid level are stacked into a rank-5 block
``(B, C, h, w, N)`` whose trailing axis is the modality axis. A fusion block

1. reprojects the N input modalities onto N_h hidden modalities (linear map
   over the modality axis, then a per-modality layer norm over channels),
2. reconstructs them with an MFFR layer (modality-axis linear, channel-grouped
   3-D convolution over (modality, height, width), modality-axis linear),
3. mixes them with an MFSAF layer (per-modality spatial self-attention with
   strided-convolution key/value reduction, each modality acting as one head),
4. adds a second MFFR reconstruction back onto the reprojected features, and
5. merges the hidden-modality axis away (max, mean or learned linear).

Nothing but the reprojection weight depends on the number of input
modalities, so the same block accepts any N >= 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Dropout, GroupedConv3d, LayerNorm, Linear, Module, ModuleList, Parameter
from .tensor import Tensor

MERGE_OPS = ("max", "mean", "linear")
HIDDEN_OFFSETS = (0, 4, 8, 16)


@dataclass
class FusionConfig:
    n: int = 4
    sr_strides: tuple[int, ...] = (16, 8, 4, 1)
    merge_op: str = "max"
    dropout: float = 0.1
    conv3d_kernel: tuple[int, ...] = (3, 3, 3)
    use_mffr: bool = True
    use_mfsaf: bool = True

    def __post_init__(self):
        self.sr_strides = tuple(int(m) for m in self.sr_strides)
        self.conv3d_kernel = tuple(int(k) for k in self.conv3d_kernel)
        if self.n < 1:
            raise ConfigError(f"fusion.n must be >= 1, got {self.n}")
        if len(self.sr_strides) != 4 or min(self.sr_strides) < 1:
            raise ConfigError(f"fusion.sr_strides needs 4 positive entries, got {self.sr_strides}")
        if self.merge_op not in MERGE_OPS:
            raise ConfigError(f"unknown merge op {self.merge_op!r}; choose from {MERGE_OPS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"fusion.dropout must lie in [0, 1), got {self.dropout}")
        if len(self.conv3d_kernel) != 3 or any(k < 1 or k % 2 == 0 for k in self.conv3d_kernel):
            raise ConfigError(f"fusion.conv3d_kernel needs three odd extents, got {self.conv3d_kernel}")

    @property
    def hidden_modalities(self) -> tuple[int, ...]:
        return tuple(self.n + off for off in HIDDEN_OFFSETS)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# -- stacking ---------------------------------------------------------------

def stack_modalities(pyramids, level: int) -> Tensor:
    """Stack level ``level`` of every modality's pyramid into (B, C, h, w, N)."""
    feats = [p[level] for p in pyramids]
    if not feats:
        raise DimensionError("no modalities to stack")
    for f in feats[1:]:
        if f.shape != feats[0].shape:
            raise DimensionError(f"level {level}: modality feature {f.shape} differs from {feats[0].shape}")
    return T.stack(feats, axis=-1)


def unstack_modalities(stack: Tensor) -> list[Tensor]:
    return [T.take(stack, k, axis=-1) for k in range(stack.shape[-1])]


def channel_norm(x: Tensor, norm: LayerNorm) -> Tensor:
    """Layer norm over channels, computed separately for every (position, modality)."""
    y = norm(x.permute(0, 2, 3, 4, 1))
    return y.permute(0, 4, 1, 2, 3)


# -- merge ------------------------------------------------------------------

def merge_modalities(f_res: Tensor, op: str, weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Collapse the trailing modality axis of (B, C, h, w, N) to (B, C, h, w)."""
    n = f_res.shape[-1]
    if op == "max":
        return T.tmax(f_res, axis=-1)
    if op == "mean":
        return T.sorted_sum(f_res, axis=-1) / float(n)
    if op == "linear":
        if weight is None or bias is None:
            raise ConfigError("linear merge needs weight and bias parameters")
        if weight.shape != (n,):
            raise DimensionError(f"linear merge weight {weight.shape} vs {n} modalities")
        return T.sorted_sum(f_res * weight, axis=-1) / float(n) + bias
    raise ConfigError(f"unknown merge op {op!r}")


class Merge(Module):
    def __init__(self, op: str, n_hidden: int):
        super().__init__()
        self.op = op
        if op == "linear":
            self.weight = Parameter(np.ones(n_hidden), "weight")
            self.bias = Parameter(np.zeros(1), "bias")

    def forward(self, f_res: Tensor) -> Tensor:
        if self.op == "linear":
            return merge_modalities(f_res, "linear", self.weight, self.bias)
        return merge_modalities(f_res, self.op)


# -- layers -----------------------------------------------------------------

class Reproject(Module):
    """Linear map N -> N_h over the modality axis followed by per-modality channel norm."""

    def __init__(self, channels: int, n_in: int, n_hidden: int, rng):
        super().__init__()
        self.linear = Linear(n_in, n_hidden, rng)
        self.norm = LayerNorm(channels)

    def forward(self, f: Tensor) -> Tensor:
        return channel_norm(self.linear(f), self.norm)


class MFFR(Module):
    """Multimodal feature fusion reconstruction layer."""

    def __init__(self, channels: int, n_mod: int, n_hidden: int, kernel, dropout: float, rng):
        super().__init__()
        self.linear1 = Linear(n_mod, n_hidden, rng)
        self.conv = GroupedConv3d(channels, kernel, rng)
        self.linear2 = Linear(n_hidden, n_mod, rng)
        self.drop = Dropout(dropout)

    def mix(self, f: Tensor) -> Tensor:
        """Expansion plus grouped conv, before the restoring linear map."""
        f1 = self.linear1(f)
        # (B, C, h, w, N) -> (B, C, N, h, w): channels are the conv groups.
        f2 = self.conv(f1.permute(0, 1, 4, 2, 3))
        return f2.permute(0, 1, 3, 4, 2)

    def forward(self, f: Tensor) -> Tensor:
        return self.drop(self.linear2(self.mix(f)))


class MFSAF(Module):
    """Multimodal feature self-attention fusion layer; each modality is one head."""

    def __init__(self, channels: int, n_mod: int, sr: int, rng):
        super().__init__()
        self.channels, self.sr = channels, sr
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        if sr > 1:
            self.sr_conv = Conv2d(channels, channels, sr, rng, stride=sr, groups=channels)
        self.out = Linear(n_mod, n_mod, rng)

    def attend(self, f: Tensor) -> Tensor:
        """Per-modality attention output, before the modality-mixing projection."""
        B, C, h, w, M = f.shape
        m = self.sr
        if h < m or w < m:
            raise ConfigError(f"feature map {(h, w)} is smaller than the reduction stride m={m}; use a smaller m")
        tokens = f.permute(0, 4, 2, 3, 1).reshape(B, M, h * w, C)
        q = self.q(tokens)
        if m > 1:
            grid = f.permute(0, 4, 1, 2, 3).reshape(B * M, C, h, w)
            red = self.sr_conv(grid)
            hr, wr = red.shape[2:]
            src = red.permute(0, 2, 3, 1).reshape(B, M, hr * wr, C)
        else:
            src = tokens
        k, v = self.k(src), self.v(src)
        scores = (q @ k.permute(0, 1, 3, 2)) * (1.0 / np.sqrt(C))
        att = T.softmax(scores, axis=-1) @ v
        return att.reshape(B, M, h, w, C).permute(0, 4, 2, 3, 1)

    def forward(self, f: Tensor) -> Tensor:
        return self.out(self.attend(f))


class FusionBlock(Module):
    """One pyramid level's fusion: (B, C, h, w, N) -> (B, C, h, w)."""

    def __init__(self, channels: int, n_in: int, level: int, cfg: FusionConfig, rng):
        super().__init__()
        self.cfg, self.level = cfg, level
        nh = cfg.hidden_modalities[level]
        self.n_in, self.n_hidden = n_in, nh
        self.reproject = Reproject(channels, n_in, nh, rng)
        if cfg.use_mffr:
            self.mffr_in = MFFR(channels, nh, nh, cfg.conv3d_kernel, cfg.dropout, rng)
        if cfg.use_mfsaf:
            self.mfsaf = MFSAF(channels, nh, cfg.sr_strides[level], rng)
        self.drop = Dropout(cfg.dropout)
        self.norm = LayerNorm(channels)
        if cfg.use_mffr:
            self.mffr_out = MFFR(channels, nh, nh, cfg.conv3d_kernel, cfg.dropout, rng)
        self.merge = Merge(cfg.merge_op, nh)

    def stages(self, f: Tensor) -> dict[str, Tensor]:
        """Every intermediate of the fusion pipeline, keyed by stage name."""
        if f.ndim != 5 or f.shape[-1] != self.n_in:
            raise DimensionError(f"fusion level {self.level} expects (B, C, h, w, {self.n_in}), got {f.shape}")
        out = {"pre_fusion": f}
        x = out["post_reproject"] = self.reproject(f)
        if self.cfg.use_mffr:
            x = out["post_mffr"] = self.mffr_in(x)
        if self.cfg.use_mfsaf:
            x = out["post_mfsaf"] = self.mfsaf(x)
        f_f = channel_norm(self.drop(x), self.norm)
        recon = self.mffr_out(f_f) if self.cfg.use_mffr else f_f
        out["post_residual"] = out["post_reproject"] + recon
        out["post_merge"] = self.merge(out["post_residual"])
        return out

    def forward(self, f: Tensor) -> Tensor:
        return self.stages(f)["post_merge"]


class FusionModule(Module):
    """Four fusion blocks, one per pyramid level."""

    def __init__(self, channels, n_modalities: int, cfg: FusionConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.blocks = ModuleList(FusionBlock(c, n_modalities, i, cfg, rng) for i, c in enumerate(channels))

    def forward(self, pyramids) -> list[Tensor]:
        return [blk(stack_modalities(pyramids, i)) for i, blk in enumerate(self.blocks)]
