"""Run configuration: defaults, ``key=value`` files and overrides.

Precedence is flags > file > defaults. Files hold one ``key = value`` pair
per line; ``#`` starts a comment and dashes in keys are accepted.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Optional

from .exceptions import ConfigurationError

ALPHA_GRID = (0.1, 0.2, 0.3, 0.4)
BETA_GRID = (1e-6, 1e-5, 1e-4)
TEMPERATURE_GRID = (2.0, 3.0, 4.0)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the three-term feedback loss.

    ``(use_distill, use_hint)`` of ``(False, False)``, ``(False, True)`` and
    ``(True, False)`` are the A1, A2 and A3 ablations respectively.
    """

    alpha: float = 0.3
    beta: float = 1e-5
    temperature: float = 3.0
    use_distill: bool = True
    use_hint: bool = True
    distill_t2: bool = False
    hint_stop_grad: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must be in (0, 1], got {self.alpha}", field="alpha")
        if not self.beta >= 0.0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}", field="beta")
        if not self.temperature > 0.0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}",
                                     field="temperature")


ABLATIONS = {
    "A1": dict(use_distill=False, use_hint=False),
    "A2": dict(use_distill=False, use_hint=True),
    "A3": dict(use_distill=True, use_hint=False),
    "Full": dict(use_distill=True, use_hint=True),
}


@dataclass
class ModelConfig:
    backbone: str = "gin"
    layers: int = 5
    hidden: int = 128
    readout: str = "sum"
    dropout: float = 0.5
    learn_eps: bool = False
    relating_up: bool = True
    relation_layers: int = 1
    heads: int = 4
    relation_dropout: float = 0.0
    alpha: float = 0.3
    beta: float = 1e-5
    temperature: float = 3.0
    use_distill: bool = True
    use_hint: bool = True
    distill_t2: bool = False
    hint_stop_grad: bool = False
    detach_relation: bool = False
    batch_size: int = 128
    lr: float = 0.01
    lr_step: int = 50
    lr_gamma: float = 0.5
    max_epochs: int = 300
    patience: int = 100
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.temperature, self.use_distill,
                           self.use_hint, self.distill_t2, self.hint_stop_grad)

    def validate(self, sweep: bool = False) -> "ModelConfig":
        from .backbones import BACKBONES, READOUTS

        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}",
                                     field="backbone")
        if self.readout not in READOUTS:
            raise ConfigurationError(f"readout must be one of {READOUTS}", field="readout")
        for name in ("layers", "hidden", "heads", "relation_layers", "batch_size", "lr_step"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1", field=name)
        for name in ("max_epochs", "patience"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0", field=name)
        if self.hidden % self.heads:
            raise ConfigurationError(f"heads={self.heads} must divide hidden={self.hidden}", field="heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)", field="dropout")
        if not 0.0 <= self.relation_dropout < 1.0:
            raise ConfigurationError("relation_dropout must be in [0, 1)", field="relation_dropout")
        if not self.lr >= 0.0:
            raise ConfigurationError("lr must be >= 0", field="lr")
        self.loss_weights  # range checks on alpha/beta/temperature
        if sweep:
            for name, grid in (("alpha", ALPHA_GRID), ("beta", BETA_GRID), ("temperature", TEMPERATURE_GRID)):
                if not any(abs(getattr(self, name) - g) <= 1e-12 * max(1.0, g) for g in grid):
                    raise ConfigurationError(f"{name}={getattr(self, name)} outside sweep grid {grid}",
                                             field=name)
        return self

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        return cls().with_overrides(values)

    def with_overrides(self, values: dict) -> "ModelConfig":
        """Copy with string or typed values coerced to each field's type."""
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for raw_key, raw in values.items():
            key = raw_key.replace("-", "_")
            if key not in types:
                raise ConfigurationError(f"unknown config key {raw_key!r}", field=raw_key)
            changes[key] = coerce(key, types[key], raw)
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_file(cls, path, base: Optional["ModelConfig"] = None) -> "ModelConfig":
        return (base or cls()).with_overrides(read_config_file(path))


def _format(v):
    return str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def coerce(key: str, type_name, raw):
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if type_name == "bool":
            return parse_bool(raw)
        if type_name == "int":
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if type_name == "float":
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigurationError(f"invalid value {raw!r} for {key} ({type_name})", field=key) from None


def read_config_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value", field=None)
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values
