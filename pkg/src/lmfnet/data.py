"""Dataset access: tile manifests, per-modality preprocessing, band statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .preprocess import BandStats, PreprocessRecipe, compute_dataset_stats, modality_plane, prepare_modality
from .raster import read_raster

STATS_FILE = "stats.json"


@dataclass
class ModalitySpec:
    """One network input stream: a recipe applied to a raster found via ``source``.

    ``source`` is a path pattern relative to the dataset root; ``{tile}`` is
    replaced with the tile id.
    """

    name: str
    recipe: PreprocessRecipe = field(default_factory=PreprocessRecipe)
    source: str = "tiles/{tile}/spectral"

    def __post_init__(self):
        if not self.name:
            raise ConfigError("modality name must be non-empty")
        if isinstance(self.recipe, dict):
            self.recipe = PreprocessRecipe(**self.recipe)

    def to_dict(self) -> dict:
        return {"name": self.name, "recipe": self.recipe.to_dict(), "source": self.source}


def default_modalities() -> list[ModalitySpec]:
    return [
        ModalitySpec("rgb", PreprocessRecipe("spectral_split", "rgb"), "tiles/{tile}/spectral"),
        ModalitySpec("nirrg", PreprocessRecipe("spectral_split", "nirrg"), "tiles/{tile}/spectral"),
        ModalitySpec("dsm", PreprocessRecipe("dsm_colormap", band_stats="imagenet"), "tiles/{tile}/dsm"),
    ]


@dataclass
class RasterSample:
    """Preprocessed modality planes (3, H, W) plus a class-index label plane (H, W)."""

    planes: dict[str, np.ndarray]
    label: np.ndarray
    tile_id: str = ""

    def __post_init__(self):
        shapes = {p.shape[1:] for p in self.planes.values()}
        if len(shapes) > 1 or (shapes and shapes.pop() != self.label.shape):
            raise DataError(f"sample {self.tile_id}: modality planes and label disagree on geometry")

    @property
    def shape(self) -> tuple[int, int]:
        return self.label.shape


def read_manifest(root) -> dict:
    path = Path(root) / "dataset.json"
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def split_ids(root, split: str | None) -> list[str]:
    """Tile ids of ``split`` ('train', 'test' or None for all)."""
    tiles = read_manifest(root)["tiles"]
    ids = [t["id"] for t in tiles if split is None or t["split"] == split]
    if not ids:
        raise DataError(f"dataset {root} has no tiles in split {split!r}")
    return ids


def _raw(root, spec: ModalitySpec, tile: str):
    return read_raster(Path(root) / spec.source.format(tile=tile))


def compute_modality_stats(root, modalities, tile_ids) -> dict[str, BandStats]:
    """Per-band statistics for every modality whose recipe standardises with dataset statistics."""
    out = {}
    for spec in modalities:
        if spec.recipe.band_stats == "dataset":
            out[spec.name] = compute_dataset_stats(modality_plane(spec.recipe, _raw(root, spec, t)) for t in tile_ids)
    return out


def save_stats(path, stats: dict[str, BandStats]) -> None:
    Path(path).write_text(json.dumps({k: v.to_dict() for k, v in stats.items()}, indent=1))


def load_stats(path) -> dict[str, BandStats]:
    raw = json.loads(Path(path).read_text())
    return {k: BandStats(tuple(v["mean"]), tuple(v["std"])) for k, v in raw.items()}


def resolve_stats(root, modalities, tile_ids=None) -> dict[str, BandStats]:
    """Statistics from ``<root>/stats.json`` if present, else computed over ``tile_ids`` (train split by default)."""
    path = Path(root) / STATS_FILE
    stats = load_stats(path) if path.exists() else {}
    need = [m for m in modalities if m.recipe.band_stats == "dataset" and m.name not in stats]
    if need:
        ids = tile_ids if tile_ids is not None else split_ids(root, "train")
        stats.update(compute_modality_stats(root, need, ids))
    return stats


def load_label(root, tile: str) -> np.ndarray:
    return read_raster(Path(root) / "tiles" / tile / "label").values[0].astype(np.uint8)


def load_sample(root, modalities, tile: str, stats: dict[str, BandStats]) -> RasterSample:
    planes = {m.name: prepare_modality(m.recipe, _raw(root, m, tile), stats.get(m.name)) for m in modalities}
    return RasterSample(planes, load_label(root, tile), tile)


def load_samples(root, modalities, tile_ids, stats) -> list[RasterSample]:
    return [load_sample(root, modalities, t, stats) for t in tile_ids]
