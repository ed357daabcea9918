"""Flat ``key = value`` experiment configuration.

One pair per line, ``#`` starts a comment, keys and enumerated values are
case-insensitive. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .network import check_activation
from .optim import REGULARIZERS
from .tasks import STREAM_KINDS

ORACLES = ("exact", "fisher", "gauss_newton")
REQUIRED = ("dataset", "activation", "stream")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"  # "synthetic" or "idx"
    activation: str = "relu"
    stream: str = "random_label"
    images_path: str = ""
    labels_path: str = ""
    synthetic_classes: int = 10
    synthetic_per_class: int = 128
    synthetic_dim: int = 784
    subset_size: int = 1280
    projection_dim: int = 0
    num_tasks: int = 30
    epochs_per_task: int = 200
    batch_size: int = 256
    hidden_widths: tuple[int, ...] = (256, 256, 256)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    reset_adam: bool = False
    regularizer: str = "none"
    strength: float = 0.0
    seed: int = 0
    probe_batch: int = 256
    oracles: tuple[str, ...] = ()
    output: str = "results.csv"
    checkpoint: str = ""
    resume: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.dataset = _choice("dataset", self.dataset, ("synthetic", "idx"))
        try:
            self.activation = check_activation(self.activation)
        except ValueError as exc:
            raise ConfigError(f"activation: {exc}") from None
        self.stream = _choice("stream", self.stream, STREAM_KINDS)
        self.regularizer = _choice("regularizer", self.regularizer, REGULARIZERS)
        self.oracles = tuple(_choice("oracles", o, ORACLES) for o in self.oracles)
        positive = (
            "synthetic_classes", "synthetic_per_class", "synthetic_dim", "subset_size",
            "num_tasks", "epochs_per_task", "batch_size", "probe_batch",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.projection_dim < 0:
            raise ConfigError("projection_dim must be >= 0")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ConfigError(f"hidden_widths must be positive, got {self.hidden_widths}")
        if self.lr <= 0 or self.eps <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("invalid Adam hyperparameters")
        if self.strength < 0:
            raise ConfigError("strength must be >= 0")
        if self.regularizer == "none":
            self.strength = 0.0
        if self.dataset == "idx" and not (self.images_path and self.labels_path):
            raise ConfigError("dataset = idx needs images_path and labels_path")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _choice(name: str, value: str, allowed) -> str:
    v = str(value).strip().lower().replace("-", "_")
    if v not in allowed:
        raise ConfigError(f"{name}: {value!r} is not one of {tuple(allowed)}")
    return v


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _field_types() -> dict[str, object]:
    defaults = ExperimentConfig()
    return {f.name: type(getattr(defaults, f.name)) for f in dataclasses.fields(ExperimentConfig)}


def _convert(name: str, text: str, kind):
    if name == "hidden_widths":
        return tuple(int(t) for t in text.split(",") if t.strip())
    if name == "oracles":
        return tuple(t.strip() for t in text.split(",") if t.strip())
    if kind is bool:
        return _parse_bool(text)
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    types = _field_types()
    values: dict[str, object] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lower()
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, value, types[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: cannot parse {key} = {value!r} ({exc})") from None
        lines[key] = lineno
    missing = [k for k in REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing required key(s): {', '.join(missing)}")
    cfg = ExperimentConfig.__new__(ExperimentConfig)
    for f in dataclasses.fields(ExperimentConfig):
        setattr(cfg, f.name, values.get(f.name, getattr(ExperimentConfig(), f.name)))
    try:
        cfg.validate()
    except ConfigError as exc:
        # point at the offending line when the message names a key
        for key, lineno in lines.items():
            if str(exc).startswith(key):
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def parse_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, source=path)
