"""All-MLP decoder: per-level channel projection, upsampling, concatenation, fuse, classify."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import Dropout, Linear, Module, ModuleList
from .tensor import Tensor


@dataclass
class DecoderConfig:
    embed_dim: int = 256
    num_classes: int = 5
    dropout: float = 0.1

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ConfigError("decoder.embed_dim must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("decoder.num_classes must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


def channel_linear(x: Tensor, layer: Linear) -> Tensor:
    """Apply a Linear over the channel axis of (B, C, h, w)."""
    return layer(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class MLPDecoder(Module):
    def __init__(self, in_dims, cfg: DecoderConfig, rng):
        super().__init__()
        self.cfg = cfg
        E = cfg.embed_dim
        self.proj = ModuleList(Linear(c, E, rng) for c in in_dims)
        self.fuse = Linear(len(in_dims) * E, E, rng)
        self.drop = Dropout(cfg.dropout)
        self.classifier = Linear(E, cfg.num_classes, rng)

    def decode_pyramid(self, fused) -> Tensor:
        """Four fused maps -> (B, embed_dim, H/4, W/4)."""
        fused = list(fused)
        if len(fused) != len(self.proj):
            raise DimensionError(f"decoder expects {len(self.proj)} levels, got {len(fused)}")
        B, _, h0, w0 = fused[0].shape
        for i, f in enumerate(fused):
            expect = (h0 // 2**i, w0 // 2**i)
            if f.ndim != 4 or f.shape[0] != B or f.shape[2:] != expect:
                raise DimensionError(f"pyramid level {i} has shape {f.shape}, expected spatial {expect}")
        ups = [T.resize_bilinear(channel_linear(f, lin), h0, w0) for f, lin in zip(fused, self.proj)]
        # Deepest level first, matching the usual all-MLP decoder ordering.
        cat = T.concat(ups[::-1], axis=1)
        return T.relu(channel_linear(cat, self.fuse))

    def classify(self, decoded: Tensor) -> Tensor:
        """(B, E, H/4, W/4) -> logits (B, num_classes, H, W)."""
        _, _, h, w = decoded.shape
        logits = channel_linear(self.drop(decoded), self.classifier)
        return T.resize_bilinear(logits, 4 * h, 4 * w)

    def forward(self, fused) -> Tensor:
        return self.classify(self.decode_pyramid(fused))
