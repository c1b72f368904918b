"""Run configuration: TOML file -> validated, fully defaulted ``RunConfig``.

Precedence, lowest to highest: built-in defaults, the config file,
``--set section.key=value`` overrides, then the dedicated flags
(``--seed``, ``--out``, ...).
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .errors import ConfigError

POLICIES = ("ndsnn", "rigl", "set", "static", "dense")
LAYER_KEYS = {
    "linear": {"kind", "out", "in"},
    "conv": {"kind", "filters", "kernel", "stride", "padding", "in"},
}


@dataclass
class ModelConfig:
    layers: list = field(default_factory=list)
    alpha: float = 0.5
    theta: float = 1.0
    timesteps: int = 5


@dataclass
class SparsityConfig:
    policy: str = "ndsnn"
    theta_i: float = 0.7
    theta_f: float = 0.9
    t0: int = 0
    delta_t: int = 10
    d0: float = 0.5
    d_min: float = 0.05
    stop_fraction: float = 0.75


@dataclass
class OptimizerConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 20
    lr_schedule: str = "cosine"


@dataclass
class DataConfig:
    kind: str = "synthetic"
    classes: int = 4
    features: int = 64
    samples_per_class: int = 250
    noise: float = 0.05
    train_images: str = ""
    train_labels: str = ""
    encoding: str = "direct"
    val_fraction: float = 0.1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


SECTIONS = {"model": ModelConfig, "sparsity": SparsityConfig, "optimizer": OptimizerConfig, "data": DataConfig}
TOP_LEVEL = {"seed": int, "out": str}


def _coerce(key: str, value, default):
    kind = type(default)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")
    return value


def from_dict(raw: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in raw.items():
        if key in TOP_LEVEL:
            setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a section")
            section = getattr(cfg, key)
            names = {f.name for f in dataclasses.fields(section)}
            for sub, subval in value.items():
                if sub not in names:
                    raise ConfigError(f"unknown key {key}.{sub}")
                setattr(section, sub, _coerce(f"{key}.{sub}", subval, getattr(section, sub)))
        else:
            raise ConfigError(f"unknown key {key}")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    m, s, o, d = cfg.model, cfg.sparsity, cfg.optimizer, cfg.data
    if not m.layers:
        raise ConfigError("model.layers: at least one layer is required")
    for i, layer in enumerate(m.layers):
        if not isinstance(layer, dict):
            raise ConfigError(f"model.layers[{i}]: expected a table")
        kind = layer.get("kind", "linear")
        if kind not in LAYER_KEYS:
            raise ConfigError(f"model.layers[{i}].kind: must be 'linear' or 'conv', got {kind!r}")
        layer["kind"] = kind
        for key in layer:
            if key not in LAYER_KEYS[kind]:
                raise ConfigError(f"unknown key model.layers[{i}].{key}")
        required = ("out",) if kind == "linear" else ("filters", "kernel")
        for key in required:
            if not isinstance(layer.get(key), int) or layer[key] < 1:
                raise ConfigError(f"model.layers[{i}].{key}: must be a positive integer")
        if kind == "conv":
            layer.setdefault("stride", 1)
            layer.setdefault("padding", 0)
    if not 0.0 < m.alpha <= 1.0:
        raise ConfigError("model.alpha: must lie in (0, 1]")
    if m.theta <= 0:
        raise ConfigError("model.theta: must be positive")
    if m.timesteps < 1:
        raise ConfigError("model.timesteps: must be >= 1")
    if s.policy not in POLICIES:
        raise ConfigError(f"sparsity.policy: must be one of {', '.join(POLICIES)}")
    for key in ("theta_i", "theta_f"):
        if not 0.0 <= getattr(s, key) < 1.0:
            raise ConfigError(f"sparsity.{key}: must lie in [0, 1)")
    if s.theta_i > s.theta_f:
        raise ConfigError("sparsity.theta_i: theta_i must not exceed theta_f")
    if s.delta_t < 1:
        raise ConfigError("sparsity.delta_t: must be >= 1")
    if s.t0 < 0:
        raise ConfigError("sparsity.t0: must be >= 0")
    if not 0.0 <= s.d_min <= s.d0 <= 1.0:
        raise ConfigError("sparsity.d0: need 0 <= d_min <= d0 <= 1")
    if not 0.0 <= s.stop_fraction <= 1.0:
        raise ConfigError("sparsity.stop_fraction: must lie in [0, 1]")
    if o.lr < 0:
        raise ConfigError("optimizer.lr: must be >= 0")
    if not 0.0 <= o.momentum < 1.0:
        raise ConfigError("optimizer.momentum: must lie in [0, 1)")
    if o.weight_decay < 0:
        raise ConfigError("optimizer.weight_decay: must be >= 0")
    if o.batch_size < 1 or o.epochs < 0:
        raise ConfigError("optimizer.batch_size must be >= 1 and optimizer.epochs >= 0")
    if o.lr_schedule not in ("cosine", "constant"):
        raise ConfigError("optimizer.lr_schedule: must be 'cosine' or 'constant'")
    if d.kind not in ("synthetic", "idx"):
        raise ConfigError("data.kind: must be 'synthetic' or 'idx'")
    if d.kind == "idx" and not (d.train_images and d.train_labels):
        raise ConfigError("data.train_images: idx datasets need train_images and train_labels")
    if d.kind == "synthetic" and not 1 <= d.classes <= d.features:
        raise ConfigError("data.classes: need 1 <= classes <= features")
    if d.encoding not in ("direct", "rate"):
        raise ConfigError("data.encoding: must be 'direct' or 'rate'")
    if not 0.0 <= d.val_fraction < 1.0:
        raise ConfigError("data.val_fraction: must lie in [0, 1)")
    if not 0.0 <= d.noise <= 1.0:
        raise ConfigError("data.noise: must lie in [0, 1]")


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, assignments: list[str]) -> dict:
    """Apply ``section.key=value`` strings (values parsed as TOML) to ``raw``."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        path, text = item.split("=", 1)
        parts = path.strip().split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part} is not a section")
        node[parts[-1]] = _parse_value(text.strip())
    return raw


def load_raw(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        return tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def parse_config(path, overrides: list[str] | None = None) -> RunConfig:
    return from_dict(apply_overrides(load_raw(path), overrides or []))
