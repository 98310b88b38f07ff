"""Synthetic wedge-model radargrams and strip-noise injection.

A three-layer impedance model (top, tapered wedge, bottom) is turned into a
reflectivity section, each trace is convolved with a Ricker wavelet, and the
section is min-max scaled to 8 bits. Time is measured in units of ``dt``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .ingest import round_half_up, scale_to_uint8

ORIENTATIONS = ("vertical", "horizontal", "diagonal")


@dataclass(frozen=True)
class WedgeSpec:
    width: int = 512
    height: int = 128
    top_depth: float = 0.3
    left_thickness: float = 0.0
    right_thickness: float = 0.4
    z_top: float = 2.0
    z_wedge: float = 3.0
    z_bottom: float = 2.5
    wavelet_freq: float = 0.06
    dt: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not 0 < self.top_depth < 1:
            raise ValueError(f"top_depth must lie in (0, 1), got {self.top_depth}")
        if self.left_thickness < 0 or self.right_thickness < 0:
            raise ValueError("wedge thicknesses must be non-negative")
        if min(self.z_top, self.z_wedge, self.z_bottom) <= 0:
            raise ValueError("impedances must be positive")
        if self.wavelet_freq <= 0 or self.dt <= 0:
            raise ValueError("wavelet_freq and dt must be positive")
        if self.wavelet_freq * self.dt >= 0.5:
            raise ValueError(f"wavelet_freq*dt = {self.wavelet_freq * self.dt} is at or above Nyquist (0.5)")


@dataclass(frozen=True)
class StripNoiseSpec:
    orientation: str = "vertical"
    angle: float = 45.0
    stripe_count: int = 6
    stripe_width: int = 2
    amplitude: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {self.orientation!r}")
        if not 0 <= self.amplitude <= 1:
            raise ValueError(f"amplitude must be in [0, 1], got {self.amplitude}")
        if self.stripe_width < 1:
            raise ValueError(f"stripe_width must be >= 1, got {self.stripe_width}")
        if self.stripe_count < 0:
            raise ValueError(f"stripe_count must be >= 0, got {self.stripe_count}")


_RANGE_FIELDS = ("width", "height", "top_depth", "left_thickness", "right_thickness",
                 "z_top", "z_wedge", "z_bottom", "wavelet_freq", "dt")
_INT_FIELDS = ("width", "height")


@dataclass(frozen=True)
class RandomizationRanges:
    """Inclusive (min, max) bounds for every scalar field of :class:`WedgeSpec`.

    The defaults are guesses tuned by eye to look like flat-lying layered
    radargrams; nothing pins them down.
    """

    width: tuple = (512, 512)
    height: tuple = (128, 128)
    top_depth: tuple = (0.15, 0.45)
    left_thickness: tuple = (0.0, 0.1)
    right_thickness: tuple = (0.15, 0.45)
    z_top: tuple = (1.5, 3.5)
    z_wedge: tuple = (1.5, 3.5)
    z_bottom: tuple = (1.5, 3.5)
    wavelet_freq: tuple = (0.04, 0.1)
    dt: tuple = (1.0, 1.0)

    def __post_init__(self):
        for name in _RANGE_FIELDS:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"range for {name}: min {lo} > max {hi}")
        checks = [
            (self.width[0] >= 1 and self.height[0] >= 1, "width/height minimum must be >= 1"),
            (0 < self.top_depth[0] and self.top_depth[1] < 1, "top_depth range must lie inside (0, 1)"),
            (self.left_thickness[0] >= 0 and self.right_thickness[0] >= 0, "thickness minimum must be >= 0"),
            (min(self.z_top[0], self.z_wedge[0], self.z_bottom[0]) > 0, "impedance minimum must be > 0"),
            (self.wavelet_freq[0] > 0 and self.dt[0] > 0, "wavelet_freq and dt minimum must be > 0"),
            (self.wavelet_freq[1] * self.dt[1] < 0.5, "max wavelet_freq * max dt must stay below 0.5"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)


def sample_spec(ranges: RandomizationRanges, rng) -> WedgeSpec:
    values = {}
    for name in _RANGE_FIELDS:
        lo, hi = getattr(ranges, name)
        if name in _INT_FIELDS:
            values[name] = int(rng.integers(lo, hi + 1))
        else:
            values[name] = float(rng.uniform(lo, hi))
    values["seed"] = int(rng.integers(0, 2**31))
    return WedgeSpec(**values)


def spec_as_dict(spec) -> dict:
    return {f.name: getattr(spec, f.name) for f in fields(spec)}


def ricker(freq: float, dt: float, n_samples: int) -> np.ndarray:
    """Zero-phase Ricker wavelet centred on sample ``n_samples // 2``."""
    if n_samples < 1 or n_samples % 2 == 0:
        raise ValueError(f"n_samples must be a positive odd integer, got {n_samples}")
    if freq * dt >= 0.5:
        raise ValueError(f"freq*dt = {freq * dt} aliases (must be < 0.5)")
    t = dt * (np.arange(n_samples) - n_samples // 2)
    a = (np.pi * freq * t) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def wavelet_length(freq: float, dt: float) -> int:
    # beyond 1.5 periods the wavelet is below 1e-8 of its peak
    half = math.ceil(1.5 / (freq * dt))
    return 2 * half + 1


def reflectivity(impedance) -> np.ndarray:
    """Normal-incidence reflection coefficients between consecutive samples."""
    z = np.asarray(impedance, dtype=np.float64)
    if (z <= 0).any():
        raise ValueError("impedances must be positive")
    return (z[1:] - z[:-1]) / (z[1:] + z[:-1])


def impedance_model(spec: WedgeSpec) -> np.ndarray:
    """(height, width) impedance grid with a linearly tapering middle layer."""
    h, w = spec.height, spec.width
    top = int(round_half_up(spec.top_depth * h))
    frac = np.linspace(0.0, 1.0, w) if w > 1 else np.zeros(1)
    thickness = spec.left_thickness + (spec.right_thickness - spec.left_thickness) * frac
    bottom = np.minimum(top + round_half_up(thickness * h).astype(int), h)
    rows = np.arange(h)[:, None]
    z = np.where(rows < top, spec.z_top, np.where(rows < bottom[None, :], spec.z_wedge, spec.z_bottom))
    return z.astype(np.float64)


def reflectivity_section(spec: WedgeSpec) -> np.ndarray:
    """Per-trace reflectivity aligned with image rows (row 0 carries no interface)."""
    z = impedance_model(spec)
    r = np.zeros_like(z)
    r[1:] = (z[1:] - z[:-1]) / (z[1:] + z[:-1])
    return r


def convolve_traces(section: np.ndarray, wavelet: np.ndarray) -> np.ndarray:
    """'same'-length convolution of every column with a centred odd-length wavelet."""
    c, n = wavelet.size // 2, section.shape[0]
    # np.convolve(mode="same") returns max(M, N) samples; slice "full" instead
    return np.stack([np.convolve(section[:, j], wavelet)[c:c + n] for j in range(section.shape[1])], axis=1)


def synthesize_float(spec: WedgeSpec) -> np.ndarray:
    w = ricker(spec.wavelet_freq, spec.dt, wavelet_length(spec.wavelet_freq, spec.dt))
    return convolve_traces(reflectivity_section(spec), w)


def synthesize(spec: WedgeSpec) -> np.ndarray:
    """Render a wedge model to an 8-bit image (constant sections become mid-gray)."""
    return scale_to_uint8(synthesize_float(spec))


def stripe_mask(shape, spec: StripNoiseSpec) -> np.ndarray:
    h, w = shape
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros(shape, dtype=bool)
    sw = spec.stripe_width
    if spec.orientation == "diagonal":
        theta = math.radians(spec.angle)
        nx, ny = -math.sin(theta), math.cos(theta)
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(spec.stripe_count):
            x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
            mask |= np.abs((xx - x0) * nx + (yy - y0) * ny) < sw / 2.0
        return mask
    extent = w if spec.orientation == "vertical" else h
    for _ in range(spec.stripe_count):
        start = int(rng.integers(0, max(extent - sw, 0) + 1))
        if spec.orientation == "vertical":
            mask[:, start:start + sw] = True
        else:
            mask[start:start + sw, :] = True
    return mask


def inject_strip_noise(image: np.ndarray, spec: StripNoiseSpec) -> np.ndarray:
    """Brighten randomly placed stripe bands by ``amplitude * 255`` and clamp."""
    if spec.amplitude == 0 or spec.stripe_count == 0:
        return image.copy()
    mask = stripe_mask(image.shape, spec)
    out = image.astype(np.float64) + np.where(mask, spec.amplitude * 255.0, 0.0)
    return np.clip(round_half_up(out), 0, 255).astype(np.uint8)
