"""Planar raster container with a JSON sidecar, plus PNG previews."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

_DTYPES = {"float32": "<f4", "uint8": "u1"}

# Ground, foliage, building, water, bridge.
CLASS_PALETTE = np.array(
    [[170, 170, 170], [34, 139, 34], [200, 60, 50], [30, 90, 200], [250, 200, 20]], dtype=np.uint8
)
CLASS_NAMES = ("ground", "foliage", "building", "water", "bridge")


@dataclass
class RasterPlane:
    """Planar raster: ``values`` has shape (bands, height, width)."""

    values: np.ndarray
    nodata: float | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3:
            raise DataError(f"raster values must be (bands, height, width), got {v.shape}")
        self.values = v

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def valid_mask(self) -> np.ndarray:
        """Finite, non-nodata pixels, per band."""
        mask = np.isfinite(self.values)
        if self.nodata is not None:
            mask &= self.values != self.nodata
        return mask


def write_raster(path, plane: RasterPlane, dtype: str = "float32") -> Path:
    """Write ``<path>.bin`` and ``<path>.json``; returns the .bin path."""
    if dtype not in _DTYPES:
        raise DataError(f"unsupported raster dtype {dtype!r}")
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    bin_path = base.with_name(base.name + ".bin")
    meta = {
        "width": plane.width,
        "height": plane.height,
        "bands": plane.bands,
        "dtype": dtype,
        "nodata": plane.nodata,
    }
    bin_path.write_bytes(np.ascontiguousarray(plane.values, dtype=_DTYPES[dtype]).tobytes())
    base.with_name(base.name + ".json").write_text(json.dumps(meta, indent=1))
    return bin_path


def read_raster(path) -> RasterPlane:
    base = Path(path)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    sidecar = base.with_name(base.name + ".json")
    bin_path = base.with_name(base.name + ".bin")
    if not sidecar.exists() or not bin_path.exists():
        raise DataError(f"raster {base} not found (need .bin and .json)")
    meta = json.loads(sidecar.read_text())
    try:
        shape = (int(meta["bands"]), int(meta["height"]), int(meta["width"]))
        dt = np.dtype(_DTYPES[meta["dtype"]])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{sidecar}: malformed sidecar") from exc
    raw = bin_path.read_bytes()
    if len(raw) != int(np.prod(shape)) * dt.itemsize:
        raise DataError(f"{bin_path}: size {len(raw)} does not match sidecar shape {shape}")
    values = np.frombuffer(raw, dtype=dt).reshape(shape).astype(meta["dtype"])
    return RasterPlane(values, meta.get("nodata"))


def save_png(path, image: np.ndarray) -> None:
    """Save (3, H, W) floats in [0, 1] or (H, W, 3) uint8 as PNG."""
    from PIL import Image

    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = np.clip(np.rint(arr.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def class_map_preview(labels: np.ndarray) -> np.ndarray:
    """(H, W) class indices -> (H, W, 3) uint8 using the fixed 5-class palette; other values black."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    ok = labels < len(CLASS_PALETTE)
    out[ok] = CLASS_PALETTE[labels[ok]]
    return out
