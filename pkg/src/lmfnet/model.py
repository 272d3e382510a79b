"""Network assembly: shared encoder -> per-level fusion -> MLP decoder."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, MLPDecoder
from .encoder import EncoderConfig, MixTransformerEncoder
from .errors import ConfigError, DimensionError
from .fusion import FusionConfig, FusionModule, stack_modalities
from .nn import Module
from .tensor import Tensor

ABLATION_MODES = ("full", "cat_only", "mffr_only", "mfsaf_only")


def parse_ablation_mode(mode: str, modalities) -> tuple[str, str | None]:
    """Split ``mode`` into (kind, unimodal name)."""
    if mode in ABLATION_MODES:
        return mode, None
    if mode.startswith("unimodal:"):
        name = mode.split(":", 1)[1]
        if name not in modalities:
            raise ConfigError(f"ablation mode {mode!r} names unknown modality; configured: {list(modalities)}")
        return "unimodal", name
    raise ConfigError(f"unknown ablation mode {mode!r}")


@dataclass
class ModelConfig:
    modalities: tuple[str, ...] = ("rgb", "nirrg", "dsm")
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    ablation_mode: str = "full"

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        if not self.modalities:
            raise ConfigError("at least one modality must be configured")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError(f"duplicate modality names in {self.modalities}")
        parse_ablation_mode(self.ablation_mode, self.modalities)

    @property
    def active_modalities(self) -> tuple[str, ...]:
        kind, name = parse_ablation_mode(self.ablation_mode, self.modalities)
        return (name,) if kind == "unimodal" else self.modalities

    def with_mode(self, mode: str) -> "ModelConfig":
        return replace(self, ablation_mode=mode)


class LMFNet(Module):
    """Multimodal segmentation network.

    ``forward`` takes one (B, 3, H, W) tensor per active modality, in
    configuration order, and returns logits (B, num_classes, H, W).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        kind, _ = parse_ablation_mode(cfg.ablation_mode, cfg.modalities)
        self.kind = kind
        self.modalities = cfg.active_modalities
        n = len(self.modalities)
        dims = cfg.encoder.embed_dims
        self.encoder = MixTransformerEncoder(cfg.encoder, rng)
        if kind in ("full", "mffr_only", "mfsaf_only"):
            fcfg = replace(cfg.fusion, use_mffr=kind != "mfsaf_only", use_mfsaf=kind != "mffr_only")
            self.fusion = FusionModule(dims, n, fcfg, rng)
            dec_dims = dims
        else:
            self.fusion = None
            dec_dims = tuple(n * d for d in dims) if kind == "cat_only" else dims
        self.decoder = MLPDecoder(dec_dims, cfg.decoder, rng)

    def _inputs(self, inputs) -> list[Tensor]:
        if isinstance(inputs, dict):
            missing = [m for m in self.modalities if m not in inputs]
            if missing:
                raise DimensionError(f"missing modality inputs {missing}")
            inputs = [inputs[m] for m in self.modalities]
        inputs = [T.as_tensor(x) for x in inputs]
        if len(inputs) != len(self.modalities):
            raise DimensionError(f"expected {len(self.modalities)} modality inputs, got {len(inputs)}")
        return inputs

    def fuse(self, pyramids) -> list[Tensor]:
        if self.kind == "unimodal":
            return list(pyramids[0])
        if self.kind == "cat_only":
            return [T.concat([p[i] for p in pyramids], axis=1) for i in range(4)]
        return self.fusion(pyramids)

    def forward(self, inputs) -> Tensor:
        pyramids = self.encoder.extract_pyramid(self._inputs(inputs))
        return self.decoder(self.fuse(pyramids))

    def fusion_stages(self, inputs) -> list[dict[str, Tensor]]:
        """Per-level fusion intermediates (only for modes with a fusion module)."""
        if self.fusion is None:
            raise ConfigError(f"ablation mode {self.cfg.ablation_mode!r} has no fusion module")
        pyramids = self.encoder.extract_pyramid(self._inputs(inputs))
        return [blk.stages(stack_modalities(pyramids, i)) for i, blk in enumerate(self.fusion.blocks)]


def count_parameters(model_or_cfg) -> dict[str, int]:
    """Exact parameter counts: total plus encoder / fusion / decoder and fusion sub-blocks."""
    model = model_or_cfg if isinstance(model_or_cfg, LMFNet) else LMFNet(model_or_cfg)
    counts: dict[str, int] = {"encoder": 0, "fusion": 0, "decoder": 0}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        counts[top] += p.size
        parts = name.split(".")
        if top == "fusion":
            key = "fusion." + parts[3]
            counts[key] = counts.get(key, 0) + p.size
    counts["total"] = counts["encoder"] + counts["fusion"] + counts["decoder"]
    return counts
