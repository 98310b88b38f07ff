"""Raw radar grids to 8-bit radargram images, and images to model inputs.

Gray images are plain 2-D ``uint8`` numpy arrays (rows = depth samples,
columns = traces).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor

RG1_MAGIC = b"RGRD"
RG1_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class RGridError(ValueError):
    """Base class for RG1 parse failures."""


class BadMagicError(RGridError):
    pass


class UnsupportedVersionError(RGridError):
    pass


class TruncatedFileError(RGridError):
    pass


class NonFiniteError(RGridError):
    pass


@dataclass
class RadarGrid:
    values: np.ndarray  # (rows, cols) float32 echo strengths

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype="<f4")
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError(f"radar grid must be 2-D and non-empty, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise NonFiniteError("radar grid contains NaN or Inf values")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def parse_rgrid(buf: bytes, source="<bytes>") -> RadarGrid:
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"{source}: header needs {_HEADER.size} bytes, got {len(buf)}")
    magic, version, rows, cols = _HEADER.unpack_from(buf)
    if magic != RG1_MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {RG1_MAGIC!r}")
    if version != RG1_VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported RG1 version {version}")
    expected = _HEADER.size + 4 * rows * cols
    if len(buf) < expected:
        raise TruncatedFileError(f"{source}: expected {expected} bytes for a {rows}x{cols} grid, got {len(buf)}")
    if len(buf) > expected:
        raise RGridError(f"{source}: {len(buf) - expected} trailing bytes after a {rows}x{cols} grid")
    if rows < 1 or cols < 1:
        raise RGridError(f"{source}: empty grid {rows}x{cols}")
    values = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=_HEADER.size).reshape(rows, cols)
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{source}: grid contains NaN or Inf values")
    return RadarGrid(values.copy())


def read_rgrid(path) -> RadarGrid:
    path = Path(path)
    return parse_rgrid(path.read_bytes(), source=str(path))


def dump_rgrid(grid: RadarGrid) -> bytes:
    return _HEADER.pack(RG1_MAGIC, RG1_VERSION, grid.rows, grid.cols) + grid.values.astype("<f4").tobytes()


def write_rgrid(grid: RadarGrid, path) -> None:
    Path(path).write_bytes(dump_rgrid(grid))


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def scale_to_uint8(values, vmin=None, vmax=None) -> np.ndarray:
    """Min-max map to 0..255 with round-half-up; a constant input maps to 128."""
    v = np.asarray(values, dtype=np.float64)
    lo = v.min() if vmin is None else float(vmin)
    hi = v.max() if vmax is None else float(vmax)
    if hi <= lo:
        return np.full(v.shape, 128, dtype=np.uint8)
    p = round_half_up(255.0 * (v - lo) / (hi - lo))
    return np.clip(p, 0, 255).astype(np.uint8)


def _prepare(values, mode, offset):
    v = np.asarray(values, dtype=np.float64) + offset
    if mode == "linear":
        return v
    if mode == "log":
        if v.min() <= 0:
            raise ValueError(f"log scaling needs positive values; minimum after offset {offset} is {v.min()}")
        return np.log10(v)
    raise ValueError(f"unknown scaling mode {mode!r}")


def to_grayscale(grid: RadarGrid, mode="linear", offset=0.0, vmin=None, vmax=None) -> np.ndarray:
    """Echo strengths to an 8-bit image.

    ``vmin``/``vmax`` (in the transformed domain) override the per-image
    extremes, which is how corpus-wide scaling is done.
    """
    return scale_to_uint8(_prepare(grid.values, mode, offset), vmin, vmax)


def dataset_range(grids, mode="linear", offset=0.0):
    """Global (min, max) over several grids in the transformed domain."""
    prepared = [_prepare(g.values, mode, offset) for g in grids]
    return min(p.min() for p in prepared), max(p.max() for p in prepared)


def crop_offset(shape, crop_w, crop_h, rng):
    rows, cols = shape
    if crop_h > rows or crop_w > cols or crop_w < 1 or crop_h < 1:
        raise ValueError(f"crop {crop_w}x{crop_h} (WxH) does not fit image {cols}x{rows}")
    top = int(rng.integers(0, rows - crop_h + 1))
    left = int(rng.integers(0, cols - crop_w + 1))
    return top, left


def random_crop(image: np.ndarray, crop_w: int, crop_h: int, rng) -> np.ndarray:
    """Contiguous crop at a uniformly random offset; no resampling."""
    top, left = crop_offset(image.shape, crop_w, crop_h, rng)
    return image[top:top + crop_h, left:left + crop_w].copy()


def to_model_array(image: np.ndarray) -> np.ndarray:
    return (2.0 * (image.astype(np.float32) / np.float32(255.0)) - 1.0).astype(np.float32)


def to_model_input(image: np.ndarray) -> Tensor:
    """(H, W) uint8 -> (1, 1, H, W) float32 tensor in [-1, 1]."""
    return Tensor(to_model_array(image)[None, None], dtype=np.float32)


def from_model_output(t) -> np.ndarray:
    """Inverse of :func:`to_model_input`, clamping to [-1, 1] first."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[:2] != (1, 1):
            raise ValueError(f"expected a single (1, 1, H, W) image, got {arr.shape}")
        arr = arr[0, 0]
    arr = np.clip(arr, -1.0, 1.0)
    return np.clip(round_half_up((arr + 1.0) / 2.0 * 255.0), 0, 255).astype(np.uint8)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.array(im, dtype=np.uint8)


def write_png(image: np.ndarray, path) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError(f"expected a 2-D uint8 image, got {image.dtype} {image.shape}")
    Image.fromarray(image, mode="L").save(path, format="PNG")


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")
