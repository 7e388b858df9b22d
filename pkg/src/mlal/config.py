"""Experiment configuration: TOML in, validated dataclasses out, TOML snapshot back."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from mlal.data import SyntheticParams
from mlal.errors import ConfigError
from mlal.harness import DEFAULT_STRATEGIES, STRATEGIES, Schedule, TrainConfig
from mlal.metrics import DEFAULT_AG_METRICS, MetricId
from mlal.scoremap import PoolConfig, PoolMode, SeparationKind


@dataclass
class DatasetSection:
    manifest: str = ""  # empty: generate synthetic data from the fields below
    n_classes: int = 8
    dim: int = 16
    height: int = 8
    width: int = 8
    n_train: int = 600
    n_eval: int = 200
    blob_min: int = 2
    blob_max: int = 3
    margin: float = 3.0
    margin_jitter: float = 0.5
    noise: float = 1.0
    min_labels: int = 1
    max_labels: int = 4
    class_skew: float = 1.0
    seed: int = 0

    def synthetic(self) -> SyntheticParams:
        kw = {f.name: getattr(self, f.name) for f in fields(SyntheticParams)}
        return SyntheticParams(**kw)


@dataclass
class ModelSection:
    mode: str = "weldon"
    k_top: int = 0  # 0: max(1, round(0.1 * H * W))
    k_bot: int = 0
    alpha: float = 1.0
    maps_per_class: int = 1
    separation: str = "extreme"
    lr: float = 0.1
    batch_size: int = 16
    init_scale: float = 0.01
    warm_start: bool = False

    def pool(self) -> PoolConfig:
        return PoolConfig(
            mode=PoolMode(self.mode),
            k_top=self.k_top or None,
            k_bot=self.k_bot or None,
            alpha=self.alpha,
            maps_per_class=self.maps_per_class,
            separation=SeparationKind(self.separation),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.pool(), self.lr, self.batch_size, self.init_scale, self.warm_start)


@dataclass
class ScheduleSection:
    initial_size: int = 60
    adds: list = field(default_factory=lambda: [60, 60, 60, 60, 300])
    epochs: list = field(default_factory=list)  # empty: 35/25 template scaled by epoch_scale
    epoch_scale: float = 1.0
    trials: int = 3


@dataclass
class ExperimentSection:
    strategies: list = field(default_factory=lambda: list(DEFAULT_STRATEGIES))
    ag_metrics: list = field(default_factory=lambda: [m.value for m in DEFAULT_AG_METRICS])
    seed: int = 0


@dataclass
class OutputSection:
    dir: str = "runs/default"


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "schedule": ScheduleSection,
    "experiment": ExperimentSection,
    "output": OutputSection,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        parts = {}
        for name, section_cls in SECTIONS.items():
            values = raw.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"[{name}] must be a table")
            known = {f.name: f for f in fields(section_cls)}
            for key, value in values.items():
                if key not in known:
                    raise ConfigError(f"unknown field {name}.{key}")
            parts[name] = section_cls(**values)
        cfg = cls(**parts)
        cfg.coerce()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(raw)

    def coerce(self) -> None:
        """Check field types so errors name the offending field."""
        for name in SECTIONS:
            section = getattr(self, name)
            defaults = type(section)()
            for f in fields(section):
                value, default = getattr(section, f.name), getattr(defaults, f.name)
                where = f"{name}.{f.name}"
                if isinstance(default, bool):
                    if not isinstance(value, bool):
                        raise ConfigError(f"{where} must be true or false")
                elif isinstance(default, int):
                    if isinstance(value, bool) or not isinstance(value, int):
                        raise ConfigError(f"{where} must be an integer, got {value!r}")
                elif isinstance(default, float):
                    if isinstance(value, bool) or not isinstance(value, (int, float)):
                        raise ConfigError(f"{where} must be a number, got {value!r}")
                    setattr(section, f.name, float(value))
                elif isinstance(default, str) and not isinstance(value, str):
                    raise ConfigError(f"{where} must be a string, got {value!r}")
                elif isinstance(default, list) and not isinstance(value, list):
                    raise ConfigError(f"{where} must be a list, got {value!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def snapshot(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("output")
        text = json.dumps(d, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def schedule_obj(self) -> Schedule:
        s = self.schedule
        return Schedule(
            initial_size=s.initial_size,
            adds=list(s.adds),
            epochs=list(s.epochs) or None,
            trials=s.trials,
            seed=self.experiment.seed,
            epoch_scale=s.epoch_scale,
        )

    def validate(self) -> None:
        """Everything checkable before the dataset is loaded."""
        if not self.dataset.manifest:
            try:
                self.dataset.synthetic().validate()
            except ConfigError as exc:
                raise ConfigError(f"dataset: {exc}") from None
        try:
            self.model.train_config().validate()
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None
        try:
            self.schedule_obj().validate()
        except ConfigError as exc:
            raise ConfigError(f"schedule: {exc}") from None
        if not self.experiment.strategies:
            raise ConfigError("experiment.strategies must not be empty")
        for s in self.experiment.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"experiment.strategies: unknown strategy {s!r}")
        if not self.experiment.ag_metrics:
            raise ConfigError("experiment.ag_metrics must not be empty")
        for m in self.experiment.ag_metrics:
            if m not in {x.value for x in MetricId} - {"RANDOM"}:
                raise ConfigError(f"experiment.ag_metrics: unknown metric {m!r}")
        if self.experiment.seed < 0:
            raise ConfigError("experiment.seed must be >= 0")
