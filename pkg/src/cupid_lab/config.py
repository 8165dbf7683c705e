"""Experiment configuration: one JSON document per experiment.

Unspecified fields fall back to per-task defaults, so ``{"task": "toy2"}`` is a
complete config.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .losses import LossWeights
from .nn import MlpSpec, TrainHyper

TASKS = ("toy1", "toy2", "tabular", "misclass", "ood")
REGRESSION_TASKS = ("toy1", "toy2")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Ablations:
    no_max: bool = False
    separate_branches: bool = False
    mc_dropout_baseline: bool = False


@dataclass(frozen=True)
class DataConfig:
    # toy regression
    n_per_region: int = 1000
    n_test_per_region: int = 250
    density: tuple = ()
    # blobs
    classes: int = 3
    n_per_class: int = 500
    dim: int = 4
    spread: float = 0.5
    radius: float = 1.0
    label_noise: float = 0.0
    train_fraction: float = 0.8
    # ood: the shift used by ``run``; ``shift_ladder`` is for sweeps over shift
    shift: float = 5.0
    shift_ladder: tuple = (0.0, 0.5, 1.5, 5.0)

    def __post_init__(self):
        object.__setattr__(self, "density", tuple(float(v) for v in self.density))
        object.__setattr__(self, "shift_ladder", tuple(float(v) for v in self.shift_ladder))


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    model: MlpSpec
    layer: int
    trunk_depth: int
    base: TrainHyper
    cupid: TrainHyper
    weights: LossWeights
    data: DataConfig = field(default_factory=DataConfig)
    ablations: Ablations = field(default_factory=Ablations)
    seeds: tuple = (0, 1, 2)
    mc_dropout_passes: int = 10
    standardize_inputs: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if not 1 <= self.layer < self.model.n_layers:
            raise ConfigError(
                f"insertion layer must be in [1, {self.model.n_layers - 1}], got {self.layer}"
            )
        if self.trunk_depth < 1:
            raise ConfigError("trunk_depth must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        regression = self.task in REGRESSION_TASKS
        if regression != (self.model.head == "regression"):
            raise ConfigError(f"task {self.task!r} does not match head {self.model.head!r}")

    @property
    def is_regression(self) -> bool:
        return self.task in REGRESSION_TASKS

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.to_dict()
        return json.loads(json.dumps(out))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


def _toy_model() -> MlpSpec:
    return MlpSpec((1, 64, 64, 1), ("sigmoid", "sigmoid", "none"))


def _blobs_model(dim: int, classes: int, hidden: int = 64, dropout=()) -> MlpSpec:
    return MlpSpec((dim, hidden, hidden, classes), ("sigmoid", "sigmoid", "none"), dropout,
                   head="softmax-classification")


def default_config(task: str) -> ExperimentConfig:
    """Per-task defaults.  The blob tasks share the classification loss weights;
    ``ood`` uses a narrower, longer-trained host.
    """
    if task in REGRESSION_TASKS:
        return ExperimentConfig(
            task, _toy_model(), layer=2, trunk_depth=2,
            base=TrainHyper(50, 16, 1e-3), cupid=TrainHyper(50, 8, 1e-3),
            weights=LossWeights(1e-3, 1e-2),
        )
    if task == "tabular":
        # four dense layers with sigmoid and dropout between hidden layers
        spec = MlpSpec((8, 64, 64, 64, 3), ("sigmoid", "sigmoid", "sigmoid", "none"),
                       (0.03, 0.03, 0.03, 0.0), head="softmax-classification")
        return ExperimentConfig(
            task, spec, layer=3, trunk_depth=2,
            base=TrainHyper(50, 256, 1e-3), cupid=TrainHyper(50, 256, 1e-4),
            weights=LossWeights(1e-3, 1e-2),
            data=DataConfig(n_per_class=2000, dim=8, spread=0.5, label_noise=0.1),
        )
    if task == "misclass":
        return ExperimentConfig(
            task, _blobs_model(4, 3), layer=2, trunk_depth=2,
            base=TrainHyper(50, 16, 1e-3), cupid=TrainHyper(50, 16, 1e-3),
            weights=LossWeights(1e-2, 9e-3),
            data=DataConfig(label_noise=0.1),
        )
    if task == "ood":
        # a narrow host probed after its first layer keeps a non-linear suffix,
        # which gave the strongest shift response in pilot runs
        return ExperimentConfig(
            task, _blobs_model(4, 3, hidden=16), layer=1, trunk_depth=2,
            # hosts trained to convergence separate the shift far more cleanly
            base=TrainHyper(200, 16, 1e-3), cupid=TrainHyper(50, 16, 1e-3),
            weights=LossWeights(1e-2, 9e-3),
        )
    raise ConfigError(f"task must be one of {TASKS}, got {task!r}")


_SECTIONS = {
    "base": TrainHyper,
    "cupid": TrainHyper,
    "weights": LossWeights,
    "data": DataConfig,
    "ablations": Ablations,
}


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict) or "task" not in doc:
        raise ConfigError("config must be a JSON object with a 'task' field")
    cfg = default_config(doc["task"])
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config fields {sorted(unknown)}")
    try:
        return replace(cfg, **_changes(cfg, doc))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _changes(cfg: ExperimentConfig, doc: dict) -> dict:
    changes = {}
    for key, value in doc.items():
        if key == "task":
            continue
        if key == "model":
            base = cfg.model.to_dict()
            changes[key] = MlpSpec.from_dict({**base, **value})
        elif key in _SECTIONS:
            current = asdict(getattr(cfg, key))
            extra = set(value) - set(current)
            if extra:
                raise ConfigError(f"unknown fields in {key}: {sorted(extra)}")
            changes[key] = _SECTIONS[key](**{**current, **value})
        elif key == "seeds":
            changes[key] = tuple(value)
        else:
            changes[key] = value
    return changes


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(doc)
