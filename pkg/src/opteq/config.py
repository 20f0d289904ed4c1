"""Experiment configuration: strict JSON into nested dataclasses.

Unknown fields and wrong types are rejected with the dotted path of the
offending field, so a typo in a hyperparameter name cannot pass silently.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from typing import Optional

from .activations import KINDS as ACTIVATION_KINDS
from .regularizers import KINDS as REGULARIZER_KINDS

__all__ = [
    "ConfigError",
    "ModelSpec",
    "ScheduleSpec",
    "SolverSpec",
    "RegularizerSpec",
    "TrainingSpec",
    "DatasetSpec",
    "OutputSpec",
    "ExperimentConfig",
    "parse_config",
    "load_config",
]


class ConfigError(ValueError):
    pass


@dataclass
class ModelSpec:
    depth: int = 2
    hidden: int = 16
    features: int = 8
    alpha: float = 1.0
    mu: float = 1.0
    activation: str = "relu"
    slope: Optional[float] = None
    layer_norm: float = 0.9
    extractor: str = "none"


@dataclass
class ScheduleSpec:
    eta: Optional[float] = None
    rho: float = 0.2
    c: float = 0.3
    gamma: Optional[float] = None
    L_z: Optional[float] = None


@dataclass
class SolverSpec:
    mode: str = "picard"
    K: int = 20
    tol: float = 1e-8
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)


@dataclass
class RegularizerSpec:
    kind: Optional[str] = None
    placement: str = "none"
    lam: float = 1.0
    eps: float = 1e-2
    center: Optional[list] = None
    bandwidth: Optional[float] = None
    gamma: float = 0.5
    allow_nonconvex: bool = False


@dataclass
class TrainingSpec:
    loss: str = "squared"
    weight_decay: float = 3e-4
    lr: float = 0.1
    halve_every: int = 30
    epochs: int = 10
    batch_size: Optional[int] = None
    mode: str = "unrolled"
    project: bool = True
    tol_fwd: float = 1e-8
    tol_adj: float = 1e-8


@dataclass
class DatasetSpec:
    generator: str = "gaussian_blobs"
    params: dict = field(default_factory=dict)


@dataclass
class OutputSpec:
    metrics: str = "metrics.csv"
    checkpoint: str = "checkpoint.json"


@dataclass
class ExperimentConfig:
    seed: int
    model: ModelSpec = field(default_factory=ModelSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def validate(self):
        m = self.model
        _choice(m.activation, ACTIVATION_KINDS, "model.activation")
        _choice(m.extractor, ("none", "tanh"), "model.extractor")
        if m.depth < 1 or m.hidden < 1 or m.features < 1:
            raise ConfigError("model.depth, model.hidden and model.features must be >= 1")
        if not 0 < m.alpha <= 1:
            raise ConfigError("model.alpha must lie in (0, 1]")
        _choice(self.solver.mode, ("picard", "sam"), "solver.mode")
        if self.solver.K < 1:
            raise ConfigError("solver.K must be >= 1")
        r = self.regularizer
        _choice(r.placement, ("none", "sam", "structural"), "regularizer.placement")
        if r.placement != "none":
            if r.kind is None:
                raise ConfigError("regularizer.kind is required when placement is not 'none'")
            _choice(r.kind, REGULARIZER_KINDS, "regularizer.kind")
        if (self.solver.mode == "sam") != (r.placement == "sam"):
            raise ConfigError("solver.mode 'sam' and regularizer.placement 'sam' go together")
        t = self.training
        _choice(t.loss, ("squared", "softmax_cross_entropy"), "training.loss")
        _choice(t.mode, ("unrolled", "ift"), "training.mode")
        if t.epochs < 0:
            raise ConfigError("training.epochs must be >= 0")
        if t.lr < 0:
            raise ConfigError("training.lr must be >= 0")
        from .datasets import GENERATORS

        _choice(self.dataset.generator, tuple(GENERATORS), "dataset.generator")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


def _choice(value, options, path):
    if value not in options:
        raise ConfigError(f"{path}: {value!r} is not one of {list(options)}")


def _check_type(value, hint, path):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _check_type(value, args[0], path)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if hint is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {value!r}")
        return value
    if hint is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected an array, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {hint!r}")


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"{where}: unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        where = f"{path}.{f.name}" if path else f.name
        if f.name in data:
            kwargs[f.name] = _check_type(data[f.name], hints[f.name], where)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{where}: required field missing")
    return cls(**kwargs)


def parse_config(data):
    """Build and validate an :class:`ExperimentConfig` from a parsed JSON object."""
    return _build(ExperimentConfig, data, "").validate()


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(data)
