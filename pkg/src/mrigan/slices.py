"""Slice extraction and cleaning: orientation, conform to a square size,
min-max normalization, size audit, dataset packing and PNG export."""
from __future__ import annotations

import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    ContentLoss,
    DataError,
    EvenCount,
    RangeViolation,
    ShapeMismatch,
    TooLarge,
    TooSmall,
    TooThin,
)
from .nifti import NiftiVolume

PLANES = ("sagittal", "coronal", "axial")
# axis of the (x, y, z) volume that each plane cuts along
PLANE_AXIS = {"sagittal": 0, "coronal": 1, "axial": 2}
ORIENTATION_ACTIONS = ("none", "rot90cw", "rot90ccw", "rot180", "flip_h", "flip_v")

DATASET_MAGIC = b"MRIT"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sIQII")


@dataclass(frozen=True)
class SliceImage:
    pixels: np.ndarray  # (height, width)
    plane: str = "axial"
    slice_index: int = 0
    source: str = ""

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> SliceImage:
        return replace(self, pixels=pixels)


def middle_index(extent: int) -> int:
    return extent // 2


def extract_slices(vol: NiftiVolume, plane: str, count: int = 15) -> list[SliceImage]:
    """Return the `count` slices centred on the middle of `plane`'s cut axis.

    Sagittal slices are (y, z) images, coronal (x, z) and axial (x, y).
    """
    if plane not in PLANE_AXIS:
        raise ValueError(f"unknown plane {plane!r}; expected one of {PLANES}")
    if count % 2 == 0:
        raise EvenCount(f"slice count must be odd, got {count}")
    axis = PLANE_AXIS[plane]
    extent = vol.data.shape[axis]
    if extent < count:
        raise TooThin(f"{vol.source_path}: {plane} extent {extent} < {count} slices")
    m = middle_index(extent)
    start = m - (count - 1) // 2
    out = []
    for idx in range(start, start + count):
        pixels = np.take(vol.data, idx, axis=axis)
        out.append(SliceImage(np.ascontiguousarray(pixels), plane, idx, vol.source_path))
    return out


def rotate(img: SliceImage, action: str) -> SliceImage:
    a = img.pixels
    if action == "none":
        out = a
    elif action == "rot90cw":
        out = np.rot90(a, k=-1)
    elif action == "rot90ccw":
        out = np.rot90(a, k=1)
    elif action == "rot180":
        out = np.rot90(a, k=2)
    elif action == "flip_h":
        out = a[:, ::-1]
    elif action == "flip_v":
        out = a[::-1, :]
    else:
        raise ValueError(f"unknown orientation action {action!r}; expected one of {ORIENTATION_ACTIONS}")
    return img.with_pixels(np.ascontiguousarray(out))


def _target_hw(target) -> tuple[int, int]:
    if isinstance(target, int):
        return target, target
    h, w = target
    return int(h), int(w)


def _pad_axis(a: np.ndarray, axis: int, target: int) -> np.ndarray:
    extra = target - a.shape[axis]
    if extra <= 0:
        return a
    widths = [(0, 0), (0, 0)]
    widths[axis] = (extra // 2, extra - extra // 2)
    return np.pad(a, widths, mode="constant", constant_values=0)


def _crop_window(extent: int, target: int) -> slice:
    excess = extent - target
    if excess <= 0:
        return slice(0, extent)
    before = excess // 2
    return slice(before, before + target)


def _checked_crop(img: SliceImage, th: int, tw: int, content_tolerance: float) -> SliceImage:
    a = img.pixels
    rows = _crop_window(a.shape[0], th)
    cols = _crop_window(a.shape[1], tw)
    kept = a[rows, cols]
    mag = np.abs(a).astype(np.float64)
    total = float(mag.sum())
    margin = float(mag[:rows.start].sum() + mag[rows.stop:].sum()
                   + mag[rows, :cols.start].sum() + mag[rows, cols.stop:].sum())
    if margin > content_tolerance * total:
        raise ContentLoss(
            f"{img.source or 'image'} (index {img.slice_index}): cropping {a.shape} to "
            f"{kept.shape} would drop {margin / total:.4%} of the absolute intensity "
            f"(tolerance {content_tolerance:.4%})")
    return img.with_pixels(np.ascontiguousarray(kept))


def pad_to(img: SliceImage, target=256) -> SliceImage:
    """Zero-pad evenly (floor before, ceil after) up to `target`."""
    th, tw = _target_hw(target)
    if img.height > th or img.width > tw:
        raise TooLarge(f"image {img.shape} exceeds pad target {(th, tw)}")
    return img.with_pixels(_pad_axis(_pad_axis(img.pixels, 0, th), 1, tw))


def crop_to(img: SliceImage, target=256, content_tolerance: float = 0.001) -> SliceImage:
    """Centre-crop down to `target`, refusing to drop more than
    `content_tolerance` of the image's total absolute intensity."""
    th, tw = _target_hw(target)
    if img.height < th or img.width < tw:
        raise TooSmall(f"image {img.shape} is smaller than crop target {(th, tw)}")
    return _checked_crop(img, th, tw, content_tolerance)


def conform(img: SliceImage, target=256, content_tolerance: float = 0.001) -> SliceImage:
    th, tw = _target_hw(target)
    img = _checked_crop(img, min(th, img.height), min(tw, img.width), content_tolerance)
    return img.with_pixels(_pad_axis(_pad_axis(img.pixels, 0, th), 1, tw))


def normalize(img: SliceImage) -> SliceImage:
    """Min-max rescale to [-1, 1]; constant images map to -1."""
    a = img.pixels.astype(np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        out = np.full_like(a, -1.0)
    else:
        out = 2.0 * (a - lo) / (hi - lo) - 1.0
        # pin the endpoints against rounding
        out[a == lo] = -1.0
        out[a == hi] = 1.0
    dtype = np.float64 if img.pixels.dtype == np.float64 else np.float32
    return img.with_pixels(out.astype(dtype))


@dataclass
class DimensionReport:
    counts: Counter = field(default_factory=Counter)

    @property
    def sizes(self) -> set[tuple[int, int]]:
        return set(self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "sizes": [{"height": h, "width": w, "count": c}
                      for (h, w), c in sorted(self.counts.items())],
        }


def verify_sizes(images) -> DimensionReport:
    return DimensionReport(Counter(tuple(int(s) for s in img.shape) for img in images))


@dataclass(frozen=True)
class DatasetTensor:
    values: np.ndarray  # (n, height, width) float32

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def _validate_for_packing(images, size: int) -> None:
    for i, img in enumerate(images):
        name = img.source or f"image {i}"
        if img.shape != (size, size):
            raise ShapeMismatch(f"{name}: shape {img.shape}, expected {(size, size)}")
        a = img.pixels
        if not np.all(np.isfinite(a)) or a.min() < -1 or a.max() > 1:
            raise RangeViolation(f"{name}: values outside [-1, 1] "
                                 f"(min {np.nanmin(a):.4g}, max {np.nanmax(a):.4g})")


def pack_dataset(images, path, size: int = 256) -> DatasetTensor:
    images = list(images)
    _validate_for_packing(images, size)
    values = np.empty((len(images), size, size), dtype="<f4")
    for i, img in enumerate(images):
        values[i] = img.pixels
    write_dataset(DatasetTensor(values), path)
    return DatasetTensor(values.astype(np.float32))


def write_dataset(ds: DatasetTensor, path) -> None:
    n, h, w = ds.values.shape
    with open(path, "wb") as fh:
        fh.write(_DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, h, w))
        fh.write(np.ascontiguousarray(ds.values, dtype="<f4").tobytes())


def read_dataset(path) -> DatasetTensor:
    blob = Path(path).read_bytes()
    if len(blob) < _DATASET_HEADER.size:
        raise DataError(f"{path}: too short for a dataset header")
    magic, version, n, h, w = _DATASET_HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DataError(f"{path}: unsupported dataset version {version}")
    expected = _DATASET_HEADER.size + 4 * n * h * w
    if len(blob) != expected:
        raise DataError(f"{path}: {len(blob)} bytes, header implies {expected}")
    values = np.frombuffer(blob, dtype="<f4", offset=_DATASET_HEADER.size).reshape(n, h, w)
    return DatasetTensor(values.astype(np.float32))


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 0..255 with round-half-up."""
    v = np.clip(np.asarray(pixels, dtype=np.float64), -1.0, 1.0)
    return np.floor((v + 1.0) / 2.0 * 255.0 + 0.5).astype(np.uint8)


def export_png(img, path) -> None:
    pixels = img.pixels if isinstance(img, SliceImage) else img
    Image.fromarray(to_uint8(pixels), mode="L").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Decode an 8-bit PNG back to [-1, 1] floats."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("L"), dtype=np.float32)
    return a / 255.0 * 2.0 - 1.0


def load_orientation_config(path) -> dict[str, dict[str, str]]:
    cfg = json.loads(Path(path).read_text())
    for dataset, planes in cfg.items():
        for plane, action in planes.items():
            if plane not in PLANE_AXIS:
                raise DataError(f"orientation config: dataset {dataset!r} has unknown plane {plane!r}")
            if action not in ORIENTATION_ACTIONS:
                raise DataError(f"orientation config: {dataset}/{plane} has unknown action {action!r}")
    return cfg


def prepare_slices(vol: NiftiVolume, plane: str, count: int = 15, orientation: str = "none",
                   size: int = 256, content_tolerance: float = 0.001) -> list[SliceImage]:
    """Full per-volume chain: extract, rotate, conform, normalize."""
    return [normalize(conform(rotate(s, orientation), size, content_tolerance))
            for s in extract_slices(vol, plane, count)]
