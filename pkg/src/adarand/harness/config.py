"""Experiment configuration schema (JSON files, validated with pydantic)."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from adarand.regularizers import KINDS, RegSpec


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class DatasetSpec(_Strict):
    source: Literal["synthetic-blobs", "csv-file"] = "synthetic-blobs"
    input_dim: int = Field(32, ge=2)
    latent_dim: int = Field(8, ge=2)
    num_classes: int = Field(10, ge=2)
    samples_per_class: int = Field(22, ge=2, description="train+validation pool per target class")
    test_per_class: int = Field(100, ge=1)
    spread: float = 0.3
    separation: float = 2.0
    nuisance: float = 0.6
    source_classes: int = Field(40, ge=2)
    modes_per_class: int = Field(4, ge=1, description="source blobs merged into each target class")
    source_samples_per_class: int = Field(100, ge=2)
    rotation: float = Field(0.3, description="radians, applied in each latent plane of the target task")
    shift: float = 0.3
    val_fraction: float = Field(0.1, gt=0, lt=1)
    fraction: float = Field(1.0, gt=0, le=1)
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None
    source_csv: Optional[str] = None

    @field_validator("spread")
    @classmethod
    def _positive_spread(cls, v):
        if not v > 0:
            raise ValueError("spread must be positive")
        return v

    @model_validator(mode="after")
    def _csv_paths(self):
        if self.source == "csv-file" and not (self.train_csv and self.test_csv):
            raise ValueError("csv-file datasets need train_csv and test_csv")
        synthetic = self.source == "synthetic-blobs"
        if synthetic and self.num_classes * self.modes_per_class > self.source_classes:
            raise ValueError("num_classes * modes_per_class cannot exceed source_classes")
        if self.latent_dim > self.input_dim:
            raise ValueError("latent_dim cannot exceed input_dim")
        return self


class ModelSpec(_Strict):
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    feature_dim: int = Field(16, ge=2)


class RegConfig(_Strict):
    kind: str = "AdaRand"
    lam: float = Field(1.0, alias="lambda", ge=0)
    alpha: float = Field(0.5, ge=0, le=1)
    xi: float = Field(0.1, ge=0)
    distance: Literal["cosine", "euclidean"] = "cosine"
    l2sp_head_weight: float = Field(1.0, ge=0)

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, v):
        if v not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        return v

    def spec(self) -> RegSpec:
        return RegSpec(self.kind, self.lam, self.alpha, self.xi, self.distance, self.l2sp_head_weight)


class OptimConfig(_Strict):
    lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    nesterov: bool = True
    head_lr_mult: float = Field(10.0, gt=0, description="learning-rate multiplier for the new head")
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(60, ge=0)
    milestones: list[int] = Field(default_factory=lambda: [20, 40])
    gamma: float = Field(0.1, gt=0)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.gamma ** sum(1 for m in self.milestones if epoch >= m)


class PretrainConfig(_Strict):
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    nesterov: bool = True
    weight_decay: float = Field(0.005, ge=0)
    hidden_norm: Optional[float] = Field(64.0, gt=0, description="rescale hidden activations to this mean ||a||^2")
    feature_norm: Optional[float] = Field(1.0, gt=0, description="rescale features to this mean ||g||^2")
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(30, ge=0)
    milestones: list[int] = Field(default_factory=lambda: [20])
    gamma: float = Field(0.1, gt=0)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.gamma ** sum(1 for m in self.milestones if epoch >= m)


class Seeds(_Strict):
    init: int = Field(0, ge=0)
    shuffle: int = Field(1, ge=0)
    noise: int = Field(2, ge=0)
    data: int = Field(3, ge=0)

    def offset(self, r: int) -> "Seeds":
        return Seeds(init=self.init + r, shuffle=self.shuffle + r, noise=self.noise + r, data=self.data + r)


class DiagConfig(_Strict):
    subset: int = Field(512, ge=2)
    n_cap: int = Field(512, ge=2)
    pca_samples: int = Field(1024, ge=3)


class ExperimentConfig(_Strict):
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    reg: RegConfig = Field(default_factory=RegConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    seeds: Seeds = Field(default_factory=Seeds)
    diagnostics: DiagConfig = Field(default_factory=DiagConfig)
    out: Optional[str] = None

    def widths(self, input_dim: int) -> list[int]:
        return [input_dim, *self.model.hidden, self.model.feature_dim]

    def resolved(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)

    def with_updates(self, **dotted) -> "ExperimentConfig":
        """Copy with ``section.field=value`` overrides, re-validated."""
        data = self.resolved()
        for key, value in dotted.items():
            section, name = key.split(".", 1)
            data[section][name] = value
        return ExperimentConfig.model_validate(data)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
