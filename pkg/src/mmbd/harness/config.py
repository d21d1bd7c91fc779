"""Experiment configuration (schema-checked) and named random sub-streams."""

from __future__ import annotations

import json
import zlib
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TriggerCfg(_Strict):
    # additive: ``direction``/``norm`` on the toy domain; ``chessboard``
    # (low-magnitude additive) and patch/blend on synthetic images.
    kind: Literal["additive", "patch", "blend", "chessboard"] = "additive"
    direction: list[float] = Field(default_factory=lambda: [1.0, 0.0])
    norm: float = 0.55
    patch_size: int = 3
    patch_corner: list[int] = Field(default_factory=lambda: [7, 7])
    blend_factor: float = 0.2
    magnitude: float = 0.03


class PoisonCfg(_Strict):
    target: int = 2
    sources: list[int] | None = None  # default: every class but the target
    count: int = 100
    relabel: bool = True


class TrainCfg(_Strict):
    optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    reweight: bool = False


class SearchCfg(_Strict):
    restarts: int = 30
    step: float | None = None
    tol: float = 1e-5
    max_iter: int = 2000


class MitigationCfg(_Strict):
    per_class: int = 20
    accuracy: float = 0.95
    step: float = 0.05
    momentum: float = 0.9
    lam: float = 0.1
    alpha: float = 1.5
    max_iter: int = 300
    init: float = 100.0
    init_scale: float | None = None  # start at this multiple of the clean peak instead of ``init``
    min_ratio: float = 0.5
    layers: list[int] | None = None  # default: every hidden ReLU (MLP) or the first three conv ReLUs


class AdaptiveCfg(_Strict):
    beta_t: float = 1.0
    beta_b: float = 1.0
    beta_m: float = 1e-4
    enhanced: bool = False
    inner_steps: int = 200
    inner_restarts: int = 5
    epochs: int = 40
    lr: float = 1e-3


class ImbalanceCfg(_Strict):
    target: int = 2
    factor: float = 2.0


class ExperimentConfig(_Strict):
    schema_version: int = SCHEMA_VERSION
    scenario: Literal["clean", "single-target", "all-to-all", "adaptive", "imbalance"] = "single-target"
    domain: Literal["toy-2d", "synth-image"] = "toy-2d"
    classes: int | None = None  # toy-2d: 3 (or 4 for all-to-all); synth-image: 4
    n_train_per_class: int = 500
    n_test_per_class: int = 1000
    image_noise: float = 0.03  # synth-image: per-pixel Gaussian noise
    hidden: list[int] = Field(default_factory=lambda: [64, 64, 64])
    trigger: TriggerCfg = Field(default_factory=TriggerCfg)
    poison: PoisonCfg = Field(default_factory=PoisonCfg)
    train: TrainCfg = Field(default_factory=TrainCfg)
    search: SearchCfg = Field(default_factory=SearchCfg)
    mitigation: MitigationCfg = Field(default_factory=MitigationCfg)
    adaptive: AdaptiveCfg = Field(default_factory=AdaptiveCfg)
    imbalance: ImbalanceCfg = Field(default_factory=ImbalanceCfg)
    n_models: int = 10
    theta: float = 0.05
    seed: int = 0

    @model_validator(mode="after")
    def _consistent(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        k = self.num_classes
        if not 0 <= self.poison.target < k:
            raise ValueError("poison target out of range")
        if self.poison.sources is not None:
            if any(not 0 <= s < k for s in self.poison.sources):
                raise ValueError("poison source out of range")
            if self.poison.target in self.poison.sources:
                raise ValueError("poison target listed as a source")
        if not 0 <= self.imbalance.target < k:
            raise ValueError("imbalance target out of range")
        if self.domain == "toy-2d" and self.trigger.kind != "additive":
            raise ValueError("toy-2d supports additive triggers only")
        if self.domain == "synth-image" and self.trigger.kind == "additive":
            raise ValueError("synth-image triggers are patch, blend or chessboard")
        if self.n_models < 1:
            raise ValueError("n_models must be >= 1")
        return self

    @property
    def num_classes(self) -> int:
        if self.classes is not None:
            return self.classes
        if self.domain == "synth-image" or self.scenario == "all-to-all":
            return 4
        return 3

    @property
    def attacked(self) -> bool:
        return self.scenario in ("single-target", "all-to-all", "adaptive")

    @property
    def sources(self) -> tuple[int, ...]:
        if self.poison.sources is not None:
            return tuple(self.poison.sources)
        return tuple(c for c in range(self.num_classes) if c != self.poison.target)


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML/JSON config; unknown keys are errors."""
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML/JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
    data.update(overrides or {})
    try:
        return ExperimentConfig(**data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def config_echo(cfg: ExperimentConfig) -> dict:
    return json.loads(cfg.model_dump_json())


# ---------------------------------------------------------------- seeds


def stream_seed(root: int, name: str, *extra: int) -> int:
    """Seed of the named sub-stream ``name`` under ``root``."""
    key = [int(root), zlib.crc32(name.encode())] + [int(e) for e in extra]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def member_seed(root: int, index: int) -> int:
    return stream_seed(root, "member", index)
