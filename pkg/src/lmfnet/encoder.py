"""Weight-shared hierarchical transformer encoder.

A Mix-Transformer style backbone: four stages, each an overlapping patch
embedding followed by pre-norm blocks of spatial-reduction self-attention and
a Mix-FFN (MLP with a 3x3 depthwise convolution). The same parameter set is
applied to every modality branch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Dropout, LayerNorm, Linear, Module, ModuleList
from .tensor import Tensor


@dataclass
class EncoderConfig:
    embed_dims: tuple[int, ...] = (32, 64, 160, 256)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    num_heads: tuple[int, ...] = (1, 2, 5, 8)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    patch_sizes: tuple[int, ...] = (7, 3, 3, 3)
    strides: tuple[int, ...] = (4, 2, 2, 2)
    mlp_ratio: int = 4
    in_channels: int = 3
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("embed_dims", "depths", "num_heads", "sr_ratios", "patch_sizes", "strides"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != 4:
                raise ConfigError(f"encoder.{name} needs exactly 4 entries, got {value}")
            setattr(self, name, value)
        if self.strides != (4, 2, 2, 2):
            raise ConfigError(f"encoder strides must be (4, 2, 2, 2) for the 1/4..1/32 pyramid, got {self.strides}")
        if min(self.embed_dims) < 1 or min(self.num_heads) < 1 or min(self.sr_ratios) < 1:
            raise ConfigError("encoder dims, heads and sr ratios must be positive")
        if min(self.depths) < 0:
            raise ConfigError("encoder depths must be non-negative")
        for d, h in zip(self.embed_dims, self.num_heads):
            if d % h:
                raise ConfigError(f"embed dim {d} not divisible by {h} heads")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")

    @classmethod
    def b0(cls) -> "EncoderConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "EncoderConfig":
        return cls(embed_dims=(8, 16, 24, 32), depths=(1, 1, 1, 1), num_heads=(1, 1, 1, 1))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def tokens_to_grid(x: Tensor, h: int, w: int) -> Tensor:
    """(B, h*w, C) -> (B, C, h, w)."""
    B, _, C = x.shape
    return x.reshape(B, h, w, C).permute(0, 3, 1, 2)


def grid_to_tokens(x: Tensor) -> Tensor:
    """(B, C, h, w) -> (B, h*w, C)."""
    B, C, h, w = x.shape
    return x.permute(0, 2, 3, 1).reshape(B, h * w, C)


class OverlapPatchEmbed(Module):
    def __init__(self, c_in: int, dim: int, patch: int, stride: int, rng):
        super().__init__()
        self.proj = Conv2d(c_in, dim, patch, rng, stride=stride, padding=patch // 2)
        self.norm = LayerNorm(dim)

    def forward(self, x: Tensor) -> tuple[Tensor, int, int]:
        y = self.proj(x)
        _, _, h, w = y.shape
        return self.norm(grid_to_tokens(y)), h, w


class EfficientAttention(Module):
    """Multi-head self-attention with keys/values spatially reduced by ``sr``."""

    def __init__(self, dim: int, heads: int, sr: int, rng):
        super().__init__()
        self.dim, self.heads, self.sr = dim, heads, sr
        self.q = Linear(dim, dim, rng)
        self.kv = Linear(dim, 2 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        if sr > 1:
            self.sr_conv = Conv2d(dim, dim, sr, rng, stride=sr)
            self.sr_norm = LayerNorm(dim)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        B, N, C = x.shape
        nh, d = self.heads, C // self.heads
        q = self.q(x).reshape(B, N, nh, d).permute(0, 2, 1, 3)
        if self.sr > 1:
            if h < self.sr or w < self.sr:
                raise DimensionError(f"stage grid {(h, w)} smaller than sr ratio {self.sr}")
            red = self.sr_conv(tokens_to_grid(x, h, w))
            src = self.sr_norm(grid_to_tokens(red))
        else:
            src = x
        S = src.shape[1]
        kv = self.kv(src).reshape(B, S, 2, nh, d).permute(2, 0, 3, 1, 4)
        k, v = T.take(kv, 0, 0), T.take(kv, 1, 0)
        scores = (q @ k.permute(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
        attn = T.softmax(scores, axis=-1)
        out = (attn @ v).permute(0, 2, 1, 3).reshape(B, N, C)
        return self.proj(out)


class MixFFN(Module):
    def __init__(self, dim: int, hidden: int, rng):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.dwconv = Conv2d(hidden, hidden, 3, rng, padding=1, groups=hidden)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        y = self.fc1(x)
        y = grid_to_tokens(self.dwconv(tokens_to_grid(y, h, w)))
        return self.fc2(T.gelu(y))


class Block(Module):
    def __init__(self, dim: int, heads: int, sr: int, mlp_ratio: int, dropout: float, rng):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = EfficientAttention(dim, heads, sr, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MixFFN(dim, dim * mlp_ratio, rng)
        self.drop = Dropout(dropout)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        x = x + self.drop(self.attn(self.norm1(x), h, w))
        return x + self.drop(self.mlp(self.norm2(x), h, w))


class Stage(Module):
    def __init__(self, cfg: EncoderConfig, i: int, rng):
        super().__init__()
        c_in = cfg.in_channels if i == 0 else cfg.embed_dims[i - 1]
        dim = cfg.embed_dims[i]
        self.patch_embed = OverlapPatchEmbed(c_in, dim, cfg.patch_sizes[i], cfg.strides[i], rng)
        self.blocks = ModuleList(
            Block(dim, cfg.num_heads[i], cfg.sr_ratios[i], cfg.mlp_ratio, cfg.dropout, rng)
            for _ in range(cfg.depths[i])
        )
        self.norm = LayerNorm(dim)

    def run_blocks(self, tokens: Tensor, h: int, w: int) -> Tensor:
        for blk in self.blocks:
            tokens = blk(tokens, h, w)
        return tokens

    def forward(self, x: Tensor) -> Tensor:
        tokens, h, w = self.patch_embed(x)
        tokens = self.norm(self.run_blocks(tokens, h, w))
        return tokens_to_grid(tokens, h, w)


class MixTransformerEncoder(Module):
    """Four-stage encoder mapping (B, 3, H, W) to a 4-level feature pyramid."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.stages = ModuleList(Stage(cfg, i, rng) for i in range(4))

    def patch_embed(self, x: Tensor, stage: int) -> Tensor:
        """Stage ``stage``'s overlapping patch embedding, returned as (B, C, h, w)."""
        if stage == 0:
            check_geometry(x.shape)
        tokens, h, w = self.stages[stage].patch_embed(x)
        return tokens_to_grid(tokens, h, w)

    def encoder_stage(self, grid: Tensor, stage: int) -> Tensor:
        """Apply stage ``stage``'s transformer blocks to a patch-embedded grid."""
        _, _, h, w = grid.shape
        return tokens_to_grid(self.stages[stage].run_blocks(grid_to_tokens(grid), h, w), h, w)

    def forward(self, x: Tensor) -> list[Tensor]:
        check_geometry(x.shape)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def extract_pyramid(self, modality_inputs) -> list[list[Tensor]]:
        """Run the shared encoder over each modality; pyramids come back in input order."""
        inputs = list(modality_inputs)
        if not inputs:
            raise DimensionError("at least one modality input is required")
        ref = inputs[0].shape
        for t in inputs[1:]:
            if t.shape != ref:
                raise DimensionError(f"modality geometry {t.shape} differs from {ref}")
        return [self.forward(t) for t in inputs]


def check_geometry(shape) -> None:
    if len(shape) != 4:
        raise DimensionError(f"expected (B, C, H, W) input, got {shape}")
    H, W = shape[2:]
    if H % 32 or W % 32:
        raise DimensionError(f"input extents {(H, W)} must be divisible by 32; pad upstream")
