"""Synthetic multimodal land-cover scenes.

Each tile is a raw 4-band spectral raster (R, G, B, NIR reflectance), a
1-band surface-height raster and a uint8 label plane with five classes:
ground, foliage, building, water, bridge.

Roads are labelled ground. Where a road crosses water it is either a bridge
(elevated deck) or a causeway (ground level, labelled ground); some road
segments over dry land are elevated overpasses, labelled bridge. Road, bridge
and causeway pixels share one spectral distribution, so only the height
raster separates bridges from roads. Foliage has the highest NIR response of
all classes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .raster import CLASS_NAMES, RasterPlane, write_raster

GROUND, FOLIAGE, BUILDING, WATER, BRIDGE = range(5)
GENERATOR_VERSION = 1

# Mean reflectance per band (R, G, B, NIR).
GROUND_SPEC = (0.42, 0.38, 0.30, 0.32)
ROAD_SPEC = (0.36, 0.36, 0.37, 0.27)
WATER_SPEC = (0.07, 0.12, 0.18, 0.03)
FOLIAGE_SPEC = (0.11, 0.24, 0.09, 0.66)
ROOF_SPECS = ((0.62, 0.27, 0.21, 0.36), (0.82, 0.81, 0.78, 0.45), (0.30, 0.40, 0.58, 0.30))
NIR_CEILING_NON_FOLIAGE = 0.5
NIR_FLOOR_FOLIAGE = 0.55


@dataclass
class SyntheticSpec:
    tiles: int = 8
    size: int = 256
    classes: int = 5
    seed: int = 0
    test_tiles: int = 0

    def __post_init__(self):
        if self.size < 32 or self.size % 32:
            raise ConfigError(f"tile size must be a positive multiple of 32, got {self.size}")
        if self.classes != 5:
            raise ConfigError(f"the synthetic generator produces exactly 5 classes, got {self.classes}")
        if self.tiles < 1 or not 0 <= self.test_tiles <= self.tiles:
            raise ConfigError(f"need tiles >= 1 and 0 <= test_tiles <= tiles, got {self.tiles}, {self.test_tiles}")


@dataclass
class Scene:
    spectral: np.ndarray  # (4, S, S) float32
    height: np.ndarray  # (S, S) float32
    label: np.ndarray  # (S, S) uint8


def _smooth_field(rng, size: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
    return f / max(f.std(), 1e-12)


def _disk(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _river(rng, S: int) -> tuple[np.ndarray, np.ndarray]:
    """Meandering band along x; returns (mask, centre-line row per column)."""
    width = max(6.0, rng.uniform(0.06, 0.11) * S)
    amp = rng.uniform(0.03, 0.12) * S
    period = rng.uniform(0.8, 1.6) * S
    phase = rng.uniform(0, 2 * np.pi)
    c0 = rng.uniform(0.3, 0.7) * S
    xs = np.arange(S)
    centre = c0 + amp * np.sin(2 * np.pi * xs / period + phase)
    rows = np.arange(S)[:, None]
    return np.abs(rows - centre[None, :]) <= width / 2, centre


def generate_scene(rng: np.random.Generator, size: int) -> Scene:
    S = size
    label = np.zeros((S, S), dtype=np.uint8)
    terrain = 0.8 * _smooth_field(rng, S, S / 8)
    height = terrain.copy()
    spec = np.empty((4, S, S))
    texture = _smooth_field(rng, S, 3.0)
    for b in range(4):
        spec[b] = GROUND_SPEC[b] + 0.035 * texture + 0.02 * _smooth_field(rng, S, 1.0)

    water, centre = _river(rng, S)
    transpose = rng.random() < 0.5
    if transpose:
        water = water.T
    label[water] = WATER
    height[water] = terrain[water] - 1.5
    for b in range(4):
        spec[b][water] = WATER_SPEC[b] + 0.01 * rng.normal(size=int(water.sum()))

    # Roads cross the river (perpendicular strips); one runs alongside it.
    road = np.zeros((S, S), dtype=bool)
    elevated = np.zeros((S, S), dtype=bool)
    n_cross = int(rng.integers(2, 4))
    cols = np.sort(rng.choice(np.arange(int(0.1 * S), int(0.9 * S)), size=n_cross, replace=False))
    forced = int(rng.integers(n_cross))
    near_water = ndimage.binary_dilation(water, iterations=3)
    for k, c in enumerate(cols):
        w = int(rng.integers(6, 10))
        strip = np.zeros((S, S), dtype=bool)
        strip[:, c : c + w] = True
        if transpose:
            strip = strip.T
        road |= strip
        if k == forced or rng.random() < 0.5:
            elevated |= strip & near_water
    # Parallel road away from the river, with an optional overpass segment.
    w = int(rng.integers(6, 10))
    far = (centre.mean() + S / 2) % S
    r0 = int(np.clip(far, 4, S - w - 4))
    strip = np.zeros((S, S), dtype=bool)
    strip[r0 : r0 + w, :] = True
    if transpose:
        strip = strip.T
    strip &= ~near_water
    road |= strip
    if rng.random() < 0.6:
        seg_len = int(rng.uniform(0.12, 0.25) * S)
        start = int(rng.integers(0, S - seg_len))
        seg = np.zeros((S, S), dtype=bool)
        seg[r0 : r0 + w, start : start + seg_len] = True
        if transpose:
            seg = seg.T
        elevated |= seg & strip

    road_noise = 0.02 * _smooth_field(rng, S, 1.0)
    for b in range(4):
        spec[b][road] = ROAD_SPEC[b] + road_noise[road]
    label[road] = GROUND
    label[elevated] = BRIDGE
    deck = rng.uniform(5.0, 8.0)
    height[road & ~elevated] = np.maximum(terrain[road & ~elevated], 0.0) + 0.2
    height[elevated] = deck + 0.1 * rng.normal(size=int(elevated.sum()))

    blocked = ndimage.binary_dilation(road | water, iterations=2)

    # Foliage: clusters of discs with a dome-shaped canopy.
    canopy = np.zeros((S, S))
    for _ in range(int(rng.integers(4, 9))):
        cy, cx = rng.uniform(0, S, size=2)
        for _ in range(int(rng.integers(2, 6))):
            r = max(3.0, rng.uniform(0.02, 0.055) * S)
            oy, ox = rng.normal(0, r, size=2)
            disk = _disk(S, cy + oy, cx + ox, r) & ~blocked
            yy, xx = np.mgrid[:S, :S]
            dome = rng.uniform(4, 12) * np.sqrt(np.clip(1 - ((yy - cy - oy) ** 2 + (xx - cx - ox) ** 2) / r**2, 0, 1))
            canopy = np.where(disk, np.maximum(canopy, dome), canopy)
            label[disk] = FOLIAGE
    trees = label == FOLIAGE
    height[trees] = terrain[trees] + np.maximum(canopy[trees], 1.0)
    leaf = _smooth_field(rng, S, 1.5)
    for b in range(4):
        spec[b][trees] = FOLIAGE_SPEC[b] + 0.03 * leaf[trees]

    # Buildings: flat-roofed rectangles clear of roads and water.
    placed = 0
    for attempt in range(60):
        if placed >= 7 or (placed >= 3 and attempt >= 30):
            break
        bh, bw = (max(6, int(rng.uniform(0.055, 0.14) * S)) for _ in range(2))
        y0, x0 = int(rng.integers(0, S - bh)), int(rng.integers(0, S - bw))
        if blocked[y0 : y0 + bh, x0 : x0 + bw].any() or (label[y0 : y0 + bh, x0 : x0 + bw] == BUILDING).any():
            continue
        roof = ROOF_SPECS[int(rng.integers(len(ROOF_SPECS)))]
        region = (slice(y0, y0 + bh), slice(x0, x0 + bw))
        label[region] = BUILDING
        height[region] = terrain[region].mean() + rng.uniform(8, 20)
        for b in range(4):
            spec[b][region] = roof[b] + 0.015 * rng.normal(size=(bh, bw))
        placed += 1

    spec += 0.01 * rng.normal(size=spec.shape)
    nir = spec[3]
    veg = label == FOLIAGE
    nir[veg] = np.maximum(nir[veg], NIR_FLOOR_FOLIAGE)
    nir[~veg] = np.minimum(nir[~veg], NIR_CEILING_NON_FOLIAGE)
    height = height + 0.05 * rng.normal(size=height.shape)
    return Scene(np.clip(spec, 0, 1).astype(np.float32), height.astype(np.float32), label)


def tile_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def gen_synthetic(out_dir, spec: SyntheticSpec) -> dict:
    """Write a dataset to ``out_dir`` and return its manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tiles = []
    for i in range(spec.tiles):
        scene = generate_scene(tile_rng(spec.seed, i), spec.size)
        tid = f"tile{i:04d}"
        base = out / "tiles" / tid
        write_raster(base / "spectral", RasterPlane(scene.spectral))
        write_raster(base / "dsm", RasterPlane(scene.height))
        write_raster(base / "label", RasterPlane(scene.label), dtype="uint8")
        split = "test" if i >= spec.tiles - spec.test_tiles else "train"
        tiles.append({"id": tid, "split": split})
    manifest = {
        "generator": GENERATOR_VERSION,
        "spec": asdict(spec),
        "class_names": list(CLASS_NAMES),
        "ignore_label": 255,
        "tiles": tiles,
    }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=1))
    return manifest
