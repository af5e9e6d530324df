import json
import os
from pathlib import Path
from typing import Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from data import AugmentConfig, Cifar10Spec, SyntheticSpec
from errors import ConfigError
from models import FULL_PRECISION, ModelConfig, ModelKind
from quantizer import DEFAULT_BETA
from train import TrainConfig

load_dotenv()


class Config:
    # Dataset directory fallback when neither the run config nor --data names one
    DATA_DIR = os.environ.get('LOWBIT_DATA_DIR') or None

    # Where runs write metrics.csv, model.lbq and config.resolved.json
    OUTPUT_DIR = os.environ.get('LOWBIT_OUTPUT_DIR', 'runs')

    # Logging
    LOG_LEVEL = os.environ.get('LOWBIT_LOG_LEVEL', 'INFO').upper()


DEFAULT_LR = {"FCNN": 0.001, "CVNN": 0.001, "VIT": 0.01}


class RunConfig(BaseModel):
    """One experiment: model, quantization, optimizer, data and output location."""

    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    model: ModelKind
    n_values: Union[Literal["full"], int] = 5
    beta: float = DEFAULT_BETA
    mean_mode: Literal["abs", "signed"] = "abs"
    conv_filter_size: Literal[3, 5] = 3
    lr: Optional[float] = Field(None, gt=0)
    momentum: float = Field(0.92, ge=0, lt=1)
    batch_size: int = Field(256, ge=1)
    epochs: int = Field(..., ge=1)
    augment: bool = False
    dataset: Union[SyntheticSpec, Cifar10Spec] = Field(default_factory=SyntheticSpec, discriminator="kind")
    seed: int = 0
    output_dir: Optional[str] = None
    record_epoch_time: bool = False

    @field_validator("n_values")
    @classmethod
    def _check_n_values(cls, value):
        if value != FULL_PRECISION and not 2 <= value <= 256:
            raise ValueError("n_values must be 'full' or an integer in [2, 256]")
        return value

    @field_validator("beta")
    @classmethod
    def _check_beta(cls, value):
        if not 1.0 <= value <= 2.0:
            raise ValueError("beta must lie in [1, 2]")
        return value

    def model_settings(self) -> ModelConfig:
        return ModelConfig(kind=self.model, n_values=self.n_values, conv_filter_size=self.conv_filter_size,
                           beta=self.beta, mean_mode=self.mean_mode, seed=self.seed)

    def train_settings(self) -> TrainConfig:
        return TrainConfig(lr=self.lr if self.lr is not None else DEFAULT_LR[self.model.family],
                           momentum=self.momentum, batch_size=self.batch_size, epochs=self.epochs,
                           augment=self.augment, seed=self.seed, record_epoch_time=self.record_epoch_time)

    def augment_settings(self) -> AugmentConfig:
        return AugmentConfig(enabled=self.augment)

    def resolved(self, data_dir: Optional[str] = None, output_dir: Optional[str] = None,
                 seed: Optional[int] = None) -> "RunConfig":
        """
        Copy with every default written out and command-line overrides applied.

        The result is what gets echoed to config.resolved.json; loading that
        file back reproduces the run without any environment.
        """
        updates = {
            "lr": self.lr if self.lr is not None else DEFAULT_LR[self.model.family],
            "output_dir": str(output_dir or self.output_dir or Config.OUTPUT_DIR),
        }
        if seed is not None:
            updates["seed"] = seed
        if isinstance(self.dataset, Cifar10Spec):
            directory = self.dataset.path or data_dir or Config.DATA_DIR
            updates["dataset"] = self.dataset.model_copy(update={"path": directory})
        return self.model_copy(update=updates)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return RunConfig.model_validate(raw)


def describe_validation_error(error: ValidationError) -> str:
    """One line per failing field, e.g. ``momentum: Input should be less than 1``."""
    lines = []
    for item in error.errors():
        field = ".".join(str(part) for part in item["loc"]) or "config"
        lines.append(f"{field}: {item['msg']}")
    return "; ".join(lines)
