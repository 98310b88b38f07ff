"""Flat ``key = value`` run configuration shared by all subcommands.

Precedence is command-line flag > config file > built-in default. Ranges are
written ``lo, hi`` (a single value means lo = hi); lists are comma separated.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .training import TrainConfig
from .wedge import ORIENTATIONS, RandomizationRanges, StripNoiseSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseRanges:
    """Per-image strip-noise parameters; one stripe family per listed orientation."""

    orientations: tuple = ("vertical", "diagonal")
    angle: tuple = (30.0, 60.0)
    stripe_count: tuple = (3, 10)
    stripe_width: tuple = (1, 3)
    amplitude: tuple = (0.15, 0.35)

    def __post_init__(self):
        for o in self.orientations:
            if o not in ORIENTATIONS:
                raise ValueError(f"noise orientation must be one of {ORIENTATIONS}, got {o!r}")
        for name in ("angle", "stripe_count", "stripe_width", "amplitude"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"noise_{name}: min {lo} > max {hi}")
        if self.stripe_count[0] < 0 or self.stripe_width[0] < 1:
            raise ValueError("noise_stripe_count must be >= 0 and noise_stripe_width >= 1")
        if not (0 <= self.amplitude[0] and self.amplitude[1] <= 1):
            raise ValueError("noise_amplitude must lie in [0, 1]")

    def sample(self, rng) -> list[StripNoiseSpec]:
        specs = []
        for o in self.orientations:
            specs.append(StripNoiseSpec(
                orientation=o,
                angle=float(rng.uniform(*self.angle)),
                stripe_count=int(rng.integers(self.stripe_count[0], self.stripe_count[1] + 1)),
                stripe_width=int(rng.integers(self.stripe_width[0], self.stripe_width[1] + 1)),
                amplitude=float(rng.uniform(*self.amplitude)),
                seed=int(rng.integers(0, 2**31)),
            ))
        return specs


@dataclass(frozen=True)
class IngestOptions:
    mode: str = "linear"
    offset: float = 0.0
    scaling: str = "image"

    def __post_init__(self):
        if self.mode not in ("linear", "log"):
            raise ValueError(f"mode must be 'linear' or 'log', got {self.mode!r}")
        if self.scaling not in ("image", "dataset"):
            raise ValueError(f"scaling must be 'image' or 'dataset', got {self.scaling!r}")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    ranges: RandomizationRanges = field(default_factory=RandomizationRanges)
    noise: NoiseRanges = field(default_factory=NoiseRanges)
    ingest: IngestOptions = field(default_factory=IngestOptions)

    @property
    def seed(self) -> int:
        return self.train.seed


_NOISE_KEYS = {f"noise_{f.name}": f.name for f in fields(NoiseRanges)}
_SECTIONS = {
    "train": (TrainConfig, {f.name: f.name for f in fields(TrainConfig)}),
    "ranges": (RandomizationRanges, {f.name: f.name for f in fields(RandomizationRanges)}),
    "noise": (NoiseRanges, _NOISE_KEYS),
    "ingest": (IngestOptions, {f.name: f.name for f in fields(IngestOptions)}),
}
_INT_KEYS = {"epochs", "batch_size", "crop_w", "crop_h", "checkpoint_every", "pool_capacity",
             "n_res_blocks", "base_filters", "seed", "max_steps", "width", "height",
             "noise_stripe_count", "noise_stripe_width"}


def known_keys() -> list[str]:
    return [key for _, keys in _SECTIONS.values() for key in keys]


def parse_config_text(text: str, source="<config>") -> dict[str, tuple[str, int]]:
    """Parse ``key = value`` lines; returns key -> (raw value, line number)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: empty key or value in {raw.strip()!r}")
        if key not in known_keys():
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {out[key][1]})")
        out[key] = (value, lineno)
    return out


def _scalar(key, text):
    if key in _INT_KEYS:
        return int(text)
    try:
        return float(text)
    except ValueError:
        return text


def _convert(key, value, default):
    if not isinstance(value, str):
        return value
    if isinstance(default, tuple):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        if key == "noise_orientations":
            return tuple(parts)
        vals = tuple(_scalar(key, p) for p in parts)
        if len(vals) == 1:
            vals = vals * 2
        if len(vals) != 2:
            raise ValueError(f"expected 'lo, hi', got {value!r}")
        return vals
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def build_run_config(file_values=None, overrides=None, source="<config>") -> RunConfig:
    """Merge defaults, parsed file values and CLI overrides, validating every section."""
    file_values = file_values or {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for key in overrides:
        if key not in known_keys():
            raise ConfigError(f"unknown override {key!r}")
    sections = {}
    for section, (cls, keymap) in _SECTIONS.items():
        defaults = cls()
        kwargs = {}
        for key, attr in keymap.items():
            default = getattr(defaults, attr)
            if key in overrides:
                raw, where = overrides[key], f"command line ({key})"
            elif key in file_values:
                raw, lineno = file_values[key]
                where = f"{source}:{lineno}"
            else:
                continue
            try:
                kwargs[attr] = _convert(key, raw, default)
            except ValueError as exc:
                raise ConfigError(f"{where}: bad value for {key}: {exc}") from None
        try:
            sections[section] = dataclasses.replace(defaults, **kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid {section} settings: {exc}") from None
    return RunConfig(**sections)


def load_run_config(path=None, overrides=None) -> RunConfig:
    values = {}
    source = "<defaults>"
    if path is not None:
        source = str(path)
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values = parse_config_text(text, source)
    return build_run_config(values, overrides, source)


def _format_value(v):
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_train_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def format_run_config(cfg: RunConfig) -> str:
    lines = []
    for section, (_, keymap) in _SECTIONS.items():
        obj = getattr(cfg, section)
        lines.append(f"# {section}")
        lines.extend(f"{key} = {_format_value(getattr(obj, attr))}" for key, attr in keymap.items())
    return "\n".join(lines) + "\n"


def write_train_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_train_config(cfg))


def read_train_config(path) -> TrainConfig:
    return load_run_config(path).train
