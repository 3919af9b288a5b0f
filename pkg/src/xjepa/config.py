"""Experiment configuration: strict JSON sections with defaults and a stable digest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Tuple

from .dataset import SENSOR_NOISE
from .geometry import ViewGrid, parse_view_spec
from .model import EncoderConfig, PredictorConfig, variant_configs
from .teacher import TeacherConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid or malformed experiment configuration."""


@dataclass(frozen=True)
class DatasetSection:
    n_per_class: int = 300
    seed: int = 0
    test_fraction: float = 1.0 / 3.0
    n_points: int = 2048
    orientation: str = "so3"
    noise: float = SENSOR_NOISE


@dataclass(frozen=True)
class GridSection:
    views: str = "spherical"

    def build(self) -> ViewGrid:
        return parse_view_spec(self.views)


@dataclass(frozen=True)
class ModelSection:
    variant: str = "base"
    dim: Optional[int] = None
    encoder_layers: Optional[int] = None
    predictor_layers: Optional[int] = None
    heads: Optional[int] = None
    num_groups: Optional[int] = None
    group_size: Optional[int] = None

    def build(self, teacher_dim: int) -> Tuple[EncoderConfig, PredictorConfig]:
        enc, pred = variant_configs(self.variant, teacher_dim)
        e, p = {}, {}
        if self.dim is not None:
            e["dim"] = p["dim"] = self.dim
        if self.heads is not None:
            e["heads"] = p["heads"] = self.heads
        if self.encoder_layers is not None:
            e["layers"] = self.encoder_layers
        if self.predictor_layers is not None:
            p["layers"] = self.predictor_layers
        if self.num_groups is not None:
            e["num_groups"] = self.num_groups
        if self.group_size is not None:
            e["group_size"] = self.group_size
        return replace(enc, **e), replace(pred, **p)


@dataclass(frozen=True)
class EvalSection:
    reg_lambda: float = 1e-3
    random_baseline_seeds: int = 5
    finetune_epochs: int = 10
    finetune_batch_size: int = 32
    finetune_lr: float = 5e-4
    finetune_weight_decay: float = 0.0
    head_only: bool = False


@dataclass(frozen=True)
class AnalysisSection:
    gradcheck_eps: float = 1e-5
    gradcheck_coords: int = 50
    gradcheck_tolerance: float = 1e-4
    gradvar_shapes: int = 8
    gradvar_poses: int = 12
    gradvar_seeds: int = 20
    sweep_axis: str = "masking"
    sweep_grid: Optional[List] = None
    sweep_seeds: List[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = DatasetSection()
    grid: GridSection = GridSection()
    teacher: TeacherConfig = TeacherConfig()
    model: ModelSection = ModelSection()
    train: TrainConfig = TrainConfig()
    eval: EvalSection = EvalSection()
    analysis: AnalysisSection = AnalysisSection()

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> bytes:
        blob = json.dumps(_jsonable(self.to_dict()), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()

    def hash(self) -> str:
        return self.digest().hex()

    def model_configs(self) -> Tuple[EncoderConfig, PredictorConfig]:
        return self.model.build(self.teacher.dim)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """One seed for data, teacher and training."""
        return replace(self, dataset=replace(self.dataset, seed=seed),
                       teacher=replace(self.teacher, seed=seed),
                       train=replace(self.train, seed=seed))


_SECTION_TYPES = {
    "dataset": DatasetSection, "grid": GridSection, "teacher": TeacherConfig, "model": ModelSection,
    "train": TrainConfig, "eval": EvalSection, "analysis": AnalysisSection,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build_section(name: str, cls, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(data) - set(_SECTION_TYPES))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    sections = {name: _build_section(name, _SECTION_TYPES[name], value) for name, value in data.items()}
    cfg = ExperimentConfig(**sections)
    try:
        cfg.grid.build()
        cfg.model_configs()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    return config_from_dict(data)


def load_config(path: Optional[str]) -> ExperimentConfig:
    """Defaults when ``path`` is None; I/O errors propagate as ``OSError``."""
    if path is None:
        return ExperimentConfig()
    return parse_config(Path(path).read_text(), str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(_jsonable(cfg.to_dict()), sort_keys=True, indent=2) + "\n"

