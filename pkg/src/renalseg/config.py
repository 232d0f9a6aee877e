"""Line-oriented key=value run configuration.

Unknown keys are rejected and every value is range-checked, so a typo in a
config file fails loudly instead of silently training with defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields


class ConfigError(Exception):
    pass


def _positive(value):
    if value <= 0:
        raise ValueError("must be positive")
    return value


def _fraction(value):
    if not 0.0 <= value < 1.0:
        raise ValueError("must be in [0, 1)")
    return value


@dataclass
class RunConfig:
    """Every tunable of the pipeline in one flat namespace."""

    seed: int = 0
    epochs: int = 60
    learning_rate: float = 1e-4
    depth: int = 3
    base_filters: int = 8
    dropout_rate: float = 0.25
    pca_components: int = 5
    time_samples: int = 50
    duration_sec: float = 300.0
    bbox_margin: float = 0.10
    augment_copies: int = 4
    scale_min: float = 0.8
    scale_max: float = 1.2
    loc_dim: int = 64
    seg_dim: int = 64
    phantom_depth: int = 32
    phantom_height: int = 224
    phantom_width: int = 224
    phantom_timepoints: int = 40
    phantom_duration_sec: float = 300.0
    phantom_noise_sigma: float = 0.0
    phantom_abnormal_fraction: float = 0.5
    phantom_pelvis_min: float = 0.5
    phantom_pelvis_max: float = 0.8

    def validate(self):
        try:
            _positive(self.epochs)
            _positive(self.learning_rate)
            _positive(self.depth)
            _positive(self.base_filters)
            _fraction(self.dropout_rate)
            _positive(self.pca_components)
            if self.time_samples < 2:
                raise ValueError("time_samples must be >= 2")
            _positive(self.duration_sec)
            if not 0.0 <= self.bbox_margin <= 1.0:
                raise ValueError("bbox_margin must be in [0, 1]")
            if self.augment_copies < 0:
                raise ValueError("augment_copies must be >= 0")
            if not 0.5 <= self.scale_min <= self.scale_max <= 2.0:
                raise ValueError("scale range must satisfy 0.5 <= min <= max <= 2.0")
            divisor = 2**self.depth
            for name in ("loc_dim", "seg_dim"):
                value = getattr(self, name)
                if value < divisor or value % divisor != 0:
                    raise ValueError(f"{name} must be a positive multiple of 2^depth={divisor}")
            for name in ("phantom_depth", "phantom_height", "phantom_width"):
                _positive(getattr(self, name))
            if self.phantom_timepoints < 2:
                raise ValueError("phantom_timepoints must be >= 2")
            _positive(self.phantom_duration_sec)
            if self.phantom_noise_sigma < 0:
                raise ValueError("phantom_noise_sigma must be >= 0")
            if not 0.0 <= self.phantom_abnormal_fraction <= 1.0:
                raise ValueError("phantom_abnormal_fraction must be in [0, 1]")
            if not 0.0 <= self.phantom_pelvis_min <= self.phantom_pelvis_max < 1.0:
                raise ValueError("pelvis fractions must satisfy 0 <= min <= max < 1")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_run_config(text, base=None):
    """Parse ``key=value`` lines ('#' comments allowed) over the defaults."""
    cfg = base if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = _FIELD_TYPES[key]
        try:
            if kind == "int" or kind is int:
                parsed = int(value)
            else:
                parsed = float(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: cannot parse {key}={value!r}") from None
        setattr(cfg, key, parsed)
    return cfg.validate()


def load_run_config(path=None, seed_override=None):
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = parse_run_config(fh.read(), base=cfg)
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg.validate()
