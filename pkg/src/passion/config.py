"""Flat ``key = value`` experiment configuration.

Lines look like ``lr = 2e-4``; ``#`` starts a comment. The resolved config,
with every default filled in and a unit comment per key, is written next to
each run's artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

METHODS = ("baseline", "moddrop", "passion")
COMPONENTS = ("pixel", "proto", "delta", "beta")


class ConfigError(ValueError):
    pass


def parse_profiles(text: str | None):
    """``"1|1,2|all"`` -> ``[[1], [1, 2], None]``; ``None``/``all`` means all classes."""
    if text is None or text.strip() in ("", "all"):
        return None
    out = []
    for part in text.split("|"):
        part = part.strip()
        if part == "all":
            out.append(None)
        elif part in ("none", "-"):
            out.append([])
        else:
            out.append([int(k) for k in part.split(",") if k.strip()])
    return out


def format_profiles(profiles) -> str:
    if profiles is None:
        return "all"
    return "|".join("all" if p is None else ("none" if not p else ",".join(str(k) for k in p)) for p in profiles)


def _floats(text):
    return tuple(float(x) for x in str(text).replace(" ", "").split(",") if x)


def _shape(text):
    return tuple(int(x) for x in str(text).lower().replace("x", ",").split(",") if x)


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    # data
    data_path: str | None = None
    test_path: str | None = None
    presence_path: str | None = None
    n_train: int = 120
    n_test: int = 30
    n_modalities: int = 3
    n_classes: int = 3
    shape: tuple = (64, 64)
    profiles: list | None = field(default_factory=lambda: [[1], [1, 2], [1, 2]])
    noise: float = 0.5
    data_seed: int | None = None
    missing_rates: tuple = (0.2, 0.5, 0.8)
    # method
    method: str = "passion"
    pixel: bool = True
    proto: bool = True
    delta: bool = True
    beta: bool = True
    moddrop_rate: float = 0.5
    # backbone
    width: int = 8
    depth: int = 4
    fusion: str = "mean"
    upsample: str = "nearest"
    convs_per_block: int = 1
    # optimisation
    lr: float = 2e-4
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    epochs: int = 40
    tau: float = 4.0
    lambda1: float = 0.5
    lambda2: float = 0.1
    gamma: float = 0.01
    beta_floor: float = 0.1
    augment: bool = False
    # run
    seed: int = 0
    out_dir: str = "runs/experiment"
    hd_variant: str = "percentile95"
    plots: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        for name in ("lr", "tau", "gamma", "poly_power"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("weight_decay", "lambda1", "lambda2", "noise", "beta_floor"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.moddrop_rate < 1:
            raise ConfigError("moddrop_rate must lie in [0, 1)")
        if len(self.missing_rates) != self.n_modalities:
            raise ConfigError(
                f"{len(self.missing_rates)} missing rates given for {self.n_modalities} modalities"
            )
        if self.method != "passion" and not all(self.toggles.values()):
            raise ConfigError("component toggles only apply to method = passion")
        if self.hd_variant not in ("max", "percentile95"):
            raise ConfigError("hd_variant must be max or percentile95")

    @property
    def toggles(self) -> dict[str, bool]:
        return {c: getattr(self, c) for c in COMPONENTS}

    @property
    def resolved_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def replace(self, **changes) -> "ExperimentConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ExperimentConfig(**values)


UNITS = {
    "n_train": "samples",
    "n_test": "samples",
    "shape": "pixels per axis",
    "noise": "std of additive Gaussian noise, in class-intensity units",
    "missing_rates": "fraction of training samples lacking each modality",
    "moddrop_rate": "per-iteration drop probability per available modality",
    "width": "channels at the finest level",
    "depth": "resolution levels (L + 1)",
    "lr": "initial AdamW step size, per iteration",
    "weight_decay": "decoupled decay coefficient",
    "poly_power": "exponent of (1 - t / T)",
    "epochs": "passes over the training set",
    "tau": "softmax temperature of the pixel KL",
    "lambda1": "weight of the pixel distillation term",
    "lambda2": "weight of the prototype distillation term",
    "gamma": "beta step per unit of epoch-mean RP",
    "beta_floor": "lower clamp on beta",
}

_PARSERS = {
    "shape": _shape,
    "missing_rates": _floats,
    "profiles": parse_profiles,
}


def _coerce(name: str, value: str, default):
    value = value.strip()
    if name in _PARSERS:
        return _PARSERS[name](value)
    if value.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        return _bool(value)
    if isinstance(default, int) or name == "data_seed":
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def parse_config_text(text: str, **overrides) -> ExperimentConfig:
    defaults = ExperimentConfig()
    names = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, value, getattr(defaults, key))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(), **overrides)


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "profiles":
            text = format_profiles(v)
        elif f.name == "shape":
            text = "x".join(str(s) for s in v)
        elif f.name == "missing_rates":
            text = ",".join(repr(float(x)) for x in v)
        elif v is None:
            text = "none"
        elif isinstance(v, bool):
            text = "true" if v else "false"
        else:
            text = repr(v) if isinstance(v, float) else str(v)
        unit = UNITS.get(f.name)
        lines.append(f"{f.name} = {text}" + (f"  # {unit}" if unit else ""))
    return "\n".join(lines) + "\n"
