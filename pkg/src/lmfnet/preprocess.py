"""Turning raw rasters into 3-band network inputs.

Spectral rasters (R, G, B, NIR) are split into RGB and NirRG false-colour
composites and standardised with dataset statistics. A single-band surface
model is percentile-clipped, min-max scaled per tile, rendered with a
colormap and standardised with ImageNet statistics.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .raster import RasterPlane

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
STD_FLOOR = 1e-6

RECIPE_KINDS = ("spectral_split", "dsm_colormap")
SPECTRAL_BANDS = ("rgb", "nirrg")


@dataclass
class PreprocessRecipe:
    kind: str = "spectral_split"
    bands: str = "rgb"
    alpha1: float = 5.0
    alpha2: float = 95.0
    colormap: str = "jet"
    band_stats: str = "dataset"

    def __post_init__(self):
        if self.kind not in RECIPE_KINDS:
            raise ConfigError(f"unknown recipe kind {self.kind!r}")
        if self.kind == "spectral_split" and self.bands not in SPECTRAL_BANDS:
            raise ConfigError(f"spectral_split bands must be one of {SPECTRAL_BANDS}, got {self.bands!r}")
        if not 0.0 <= self.alpha1 < self.alpha2 <= 100.0:
            raise ConfigError(f"need 0 <= alpha1 < alpha2 <= 100, got {self.alpha1}, {self.alpha2}")
        if self.band_stats not in ("dataset", "imagenet"):
            raise ConfigError(f"band_stats must be 'dataset' or 'imagenet', got {self.band_stats!r}")
        if not (self.colormap in ("jet", "gray") or self.colormap.startswith("lut:")):
            raise ConfigError(f"unknown colormap {self.colormap!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BandStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def imagenet(cls) -> "BandStats":
        return cls(IMAGENET_MEAN, IMAGENET_STD)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}


def _single_band(x: RasterPlane, op: str) -> None:
    if x.bands != 1:
        raise DataError(f"{op} expects a single-band raster, got {x.bands} bands")


def percentile_clip(x: RasterPlane, alpha1: float = 5.0, alpha2: float = 95.0) -> RasterPlane:
    """Clamp to the [alpha1, alpha2] percentiles of the valid pixels.

    Percentiles use linear interpolation between order statistics; nodata
    and non-finite pixels are excluded from the statistics and passed through.
    """
    _single_band(x, "percentile_clip")
    valid = x.valid_mask()
    if not valid.any():
        raise DataError("percentile_clip: raster has no valid pixels")
    lo, hi = np.percentile(x.values[valid].astype(np.float64), [alpha1, alpha2], method="linear")
    out = x.values.astype(np.float32, copy=True)
    out[valid] = np.clip(x.values[valid], lo, hi)
    return RasterPlane(out, x.nodata)


def minmax_normalize(x: RasterPlane) -> RasterPlane:
    """Scale valid pixels to [0, 1]; a constant plane maps to zeros.

    Invalid pixels become 0 and the result carries no nodata value.
    """
    _single_band(x, "minmax_normalize")
    valid = x.valid_mask()
    out = np.zeros(x.values.shape, dtype=np.float32)
    if valid.any():
        v = x.values[valid].astype(np.float64)
        lo, hi = v.min(), v.max()
        if hi > lo:
            out[valid] = ((v - lo) / (hi - lo)).astype(np.float32)
    return RasterPlane(out)


def jet(x: np.ndarray) -> np.ndarray:
    """Closed-form jet: (..., ) in [0, 1] -> (3, ...) in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    r = np.clip(1.5 - np.abs(4 * x - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * x - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * x - 1), 0, 1)
    return np.stack([r, g, b])


def load_lut(path) -> np.ndarray:
    """Read a 256-line ``r g b`` colour table with entries in [0, 1]."""
    try:
        rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
        table = np.array(rows, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read colour table {path}: {exc}") from exc
    if table.shape != (256, 3):
        raise DataError(f"colour table {path} must have 256 rows of 3 values, got {table.shape}")
    if table.min() < 0 or table.max() > 1:
        raise DataError(f"colour table {path} has entries outside [0, 1]")
    return table


def lut_colormap(x: np.ndarray, table: np.ndarray) -> np.ndarray:
    pos = np.clip(np.asarray(x, dtype=np.float64), 0, 1) * (len(table) - 1)
    grid = np.arange(len(table))
    return np.stack([np.interp(pos, grid, table[:, c]) for c in range(3)])


def apply_colormap(x: RasterPlane, colormap: str = "jet") -> RasterPlane:
    """Render a single band in [0, 1] as three bands in [0, 1]."""
    _single_band(x, "apply_colormap")
    v = np.clip(x.values[0], 0.0, 1.0)
    if colormap == "jet":
        rgb = jet(v)
    elif colormap == "gray":
        rgb = np.stack([v, v, v])
    elif colormap.startswith("lut:"):
        rgb = lut_colormap(v, load_lut(colormap[4:]))
    else:
        raise ConfigError(f"unknown colormap {colormap!r}")
    return RasterPlane(rgb.astype(np.float32))


def split_false_color(x: RasterPlane) -> tuple[RasterPlane, RasterPlane]:
    """(R, G, B, NIR) -> (RGB, NirRG)."""
    if x.bands != 4:
        raise DataError(f"false-colour split needs 4 bands (R, G, B, NIR), got {x.bands}")
    v = x.values
    return RasterPlane(v[[0, 1, 2]].copy(), x.nodata), RasterPlane(v[[3, 0, 1]].copy(), x.nodata)


def standardize_bands(x: RasterPlane, stats: BandStats | str | None) -> RasterPlane:
    """Per-band ``(x - mean) / max(std, 1e-6)``."""
    if isinstance(stats, str):
        if stats != "imagenet":
            raise DataError(f"stats source {stats!r} needs precomputed dataset statistics")
        stats = BandStats.imagenet()
    if stats is None:
        raise DataError("dataset statistics missing; run the stats command first")
    if len(stats.mean) != x.bands or len(stats.std) != x.bands:
        raise DataError(f"statistics for {len(stats.mean)} bands, raster has {x.bands}")
    mean = np.asarray(stats.mean, dtype=np.float64)[:, None, None]
    std = np.maximum(np.asarray(stats.std, dtype=np.float64), STD_FLOOR)[:, None, None]
    return RasterPlane(((x.values - mean) / std).astype(np.float32))


def tile_origins(extent: int, patch: int, stride: int) -> list[int]:
    if patch > extent:
        raise DataError(f"patch {patch} larger than raster extent {extent}")
    if not 1 <= stride <= patch:
        raise ConfigError(f"stride {stride} must lie in [1, patch={patch}] for full coverage")
    origins = list(range(0, extent - patch + 1, stride))
    if origins[-1] != extent - patch:
        origins.append(extent - patch)
    return origins


def tile_raster(x, patch: int, stride: int) -> list[tuple[int, int]]:
    """Top-left (row, col) origins covering the raster; the last tile per axis touches the border.

    ``x`` is a RasterPlane or a (height, width) pair.
    """
    h, w = (x.height, x.width) if isinstance(x, RasterPlane) else x
    rows, cols = tile_origins(h, patch, stride), tile_origins(w, patch, stride)
    return [(r, c) for r in rows for c in cols]


def compute_dataset_stats(samples) -> BandStats:
    """Single-pass per-band mean and population std over an iterable of planes.

    Chunks are merged with the parallel-variance update, in float64.
    """
    count = 0
    mean = m2 = None
    for s in samples:
        v = s.values if isinstance(s, RasterPlane) else np.asarray(s)
        flat = v.reshape(v.shape[0], -1).astype(np.float64)
        n = flat.shape[1]
        if n == 0:
            continue
        cm = flat.mean(axis=1)
        cm2 = ((flat - cm[:, None]) ** 2).sum(axis=1)
        if mean is None:
            count, mean, m2 = n, cm, cm2
            continue
        if cm.shape != mean.shape:
            raise DataError(f"band count changed mid-stream: {cm.shape[0]} vs {mean.shape[0]}")
        total = count + n
        delta = cm - mean
        mean = mean + delta * (n / total)
        m2 = m2 + cm2 + delta**2 * (count * n / total)
        count = total
    if mean is None:
        raise DataError("cannot compute statistics of an empty sample set")
    std = np.sqrt(m2 / count)
    return BandStats(tuple(float(v) for v in mean), tuple(float(v) for v in std))


def prepare_modality(recipe: PreprocessRecipe, raw: RasterPlane, stats: BandStats | None = None) -> np.ndarray:
    """Raw raster -> standardised (3, H, W) float32 network input."""
    if recipe.kind == "spectral_split":
        rgb, nirrg = split_false_color(raw)
        plane = rgb if recipe.bands == "rgb" else nirrg
    else:
        plane = render_dsm(raw, recipe)
    source = "imagenet" if recipe.band_stats == "imagenet" else stats
    return standardize_bands(plane, source).values


def render_dsm(raw: RasterPlane, recipe: PreprocessRecipe) -> RasterPlane:
    """Clip -> local min-max -> colormap (values in [0, 1], before standardisation)."""
    clipped = percentile_clip(raw, recipe.alpha1, recipe.alpha2)
    return apply_colormap(minmax_normalize(clipped), recipe.colormap)


def modality_plane(recipe: PreprocessRecipe, raw: RasterPlane) -> RasterPlane:
    """The 3-band [0, 1]-ish plane a recipe produces before standardisation."""
    if recipe.kind == "spectral_split":
        rgb, nirrg = split_false_color(raw)
        return rgb if recipe.bands == "rgb" else nirrg
    return render_dsm(raw, recipe)
