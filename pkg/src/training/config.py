"""
Run configuration: dataset, head, loss, optimisation and experiment sections,
loaded from YAML (or JSON) with ``--section.field value`` overrides.
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import yaml

from src.data.synthdata import DatasetSpec
from src.head.config import HeadConfig
from src.objective.losses import LossConfig
from src.utils.data_formats import load_config_file
from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)

ABLATION_STUDIES = ("ladder", "centers", "dma", "visual", "ifm", "prompting")
DEFAULT_LAMBDA_GRID = [0.5, 1.0, 2.0, 4.0, 8.0]


def _from_section(cls, data: Optional[Dict[str, Any]], section: str):
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config section {section!r} must be a mapping")
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class OptimConfig:
    """AdamW, cosine schedule, EMA and evaluation settings."""

    lr_max: float = 1e-4
    lr_min: float = 0.0
    batch_size: int = 64
    epochs: int = 30
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.9997
    eval_with_ema: bool = True
    threshold: float = 0.5
    top_k: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.lr_max <= 0 or self.lr_min < 0 or self.lr_min > self.lr_max:
            raise ConfigError(f"need 0 <= lr_min <= lr_max and lr_max > 0, got {self.lr_min}, {self.lr_max}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"batch_size and epochs must be >= 1, got {self.batch_size}, {self.epochs}")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("weight_decay must be >= 0 and eps > 0")
        for name in ("beta1", "beta2", "ema_decay"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"train.{name} must lie in [0, 1], got {getattr(self, name)}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"train.threshold must lie in (0, 1), got {self.threshold}")
        if self.top_k < 1:
            raise ConfigError(f"train.top_k must be >= 1, got {self.top_k}")


@dataclass
class ExperimentConfig:
    """Seeds and grids used by the ablation, sweep and gradient-check commands."""

    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    studies: List[str] = field(default_factory=lambda: list(ABLATION_STUDIES))
    lambda_values: List[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    prompt_lengths: List[int] = field(default_factory=lambda: [4, 8, 12])
    gradcheck_tolerance: float = 1e-4
    timing_batches: int = 3

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("experiments.seeds must not be empty")
        unknown = set(self.studies) - set(ABLATION_STUDIES)
        if unknown:
            raise ConfigError(f"unknown ablation studies {sorted(unknown)}; choose from {ABLATION_STUDIES}")
        if not self.lambda_values or any(v < 0 for v in self.lambda_values):
            raise ConfigError("experiments.lambda_values must be a non-empty list of values >= 0")
        if any(L < 0 for L in self.prompt_lengths):
            raise ConfigError("experiments.prompt_lengths must be >= 0")
        if self.gradcheck_tolerance <= 0 or self.timing_batches < 1:
            raise ConfigError("gradcheck_tolerance must be > 0 and timing_batches >= 1")


@dataclass
class TrainConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: OptimConfig = field(default_factory=OptimConfig)
    experiments: ExperimentConfig = field(default_factory=ExperimentConfig)
    output_dir: str = "runs"
    run_name: str = "pvlr"

    def resolve(self) -> "TrainConfig":
        """Fill the head's C/d/M from the dataset and validate every section."""
        for name in ("C", "d", "M"):
            value = getattr(self.head, name)
            data_value = getattr(self.dataset, name)
            if value is None:
                setattr(self.head, name, data_value)
            elif value != data_value:
                raise ConfigError(f"head.{name}={value} disagrees with dataset.{name}={data_value}")
        self.validate()
        return self

    def validate(self) -> None:
        self.dataset.validate()
        self.head.validate()
        self.loss.validate()
        self.train.validate()
        self.experiments.validate()
        if not self.run_name:
            raise ConfigError("run_name must not be empty")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        sections = {"dataset": DatasetSpec, "head": HeadConfig, "loss": LossConfig,
                    "train": OptimConfig, "experiments": ExperimentConfig}
        unknown = set(data) - set(sections) - {"output_dir", "run_name"}
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        kwargs: Dict[str, Any] = {name: _from_section(kind, data.get(name), name) for name, kind in sections.items()}
        for key in ("output_dir", "run_name"):
            if key in data:
                kwargs[key] = str(data[key])
        return cls(**kwargs)

    def replace(self, **overrides: Any) -> "TrainConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"loss.lambda_kcr": 0.0})``."""
        return apply_overrides(self.to_dict(), overrides)


def set_dotted(data: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config section in override {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key in override {key!r}")
    node[parts[-1]] = value


def apply_overrides(data: Dict[str, Any], overrides: Dict[str, Any]) -> TrainConfig:
    data = TrainConfig.from_dict(data).to_dict()
    for key, value in overrides.items():
        set_dotted(data, key, value)
    return TrainConfig.from_dict(data)


def parse_override_args(tokens: Sequence[str]) -> Dict[str, Any]:
    """Turn ``["--train.epochs", "2", "--head.use_kap", "false"]`` into typed overrides."""
    overrides: Dict[str, Any] = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or len(token) <= 2:
            raise ConfigError(f"expected --section.field, got {token!r}")
        key = token[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {token} has no value")
            raw = tokens[i + 1]
            i += 2
        try:
            overrides[key.replace("-", "_")] = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse value for {key}: {e}") from None
    return overrides


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """Defaults, then the file (if any), then overrides; the result is resolved and validated."""
    data = load_config_file(path) if path is not None else {}
    config = apply_overrides(data, overrides or {})
    logger.info(f"Loaded config{f' from {path}' if path else ''} with {len(overrides or {})} overrides")
    return config.resolve()
