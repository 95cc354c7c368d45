"""
BUPM — Configuration Layer

Responsibilities:
- Define every tunable knob as a validated pydantic model
- Load / dump JSON config bundles (experiments/configs/*.json)
- Produce the config digest stored in checkpoints

This file DOES NOT:
- Build models
- Touch the filesystem beyond reading the bundle it is given
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# Paths

BASE_DIR = Path(__file__).resolve().parent.parent
CONFIG_DIR = BASE_DIR / "experiments" / "configs"
DEFAULT_CONFIG_PATH = CONFIG_DIR / "desk.json"

THREADS_ENV = "BUPM_THREADS"

QUERY_SIZES = (192, 224, 256)


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if threads < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {threads}")
    return threads


# Model architecture


class BackboneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_stages: int = Field(3, ge=1)
    channels_per_stage: Tuple[int, ...] = (16, 32, 32)
    downsample_factor: int = 8
    feature_depth: int = Field(32, ge=1)
    kernel_size: int = 3

    @model_validator(mode="after")
    def _check_contract(self):
        if self.downsample_factor != 2 ** self.num_stages:
            raise ValueError(
                f"downsample_factor must be 2^num_stages = {2 ** self.num_stages}, "
                f"got {self.downsample_factor}"
            )
        if len(self.channels_per_stage) != self.num_stages:
            raise ValueError(
                f"channels_per_stage needs {self.num_stages} entries, "
                f"got {len(self.channels_per_stage)}"
            )
        if self.channels_per_stage[-1] != self.feature_depth:
            raise ValueError("last entry of channels_per_stage must equal feature_depth")
        if self.kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        return self


class MaskDetectorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    branch_kernels: Tuple[int, ...] = (1, 3, 5)
    filters_per_branch: int = 4

    @model_validator(mode="after")
    def _check_inception(self):
        if tuple(self.branch_kernels) != (1, 3, 5):
            raise ValueError(f"branch kernels must be (1, 3, 5), got {self.branch_kernels}")
        if self.filters_per_branch != 4:
            raise ValueError("each mask-detector branch has exactly 4 filters")
        return self


class VerifierConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layer_units: Tuple[int, ...] = (16, 4, 1)

    @field_validator("layer_units")
    @classmethod
    def _check_units(cls, v):
        if tuple(v) != (16, 4, 1):
            raise ValueError(f"verifier layers must be (16, 4, 1), got {v}")
        return tuple(v)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backbone: BackboneConfig = BackboneConfig()
    mask_detector: MaskDetectorConfig = MaskDetectorConfig()
    verifier: VerifierConfig = VerifierConfig()
    # circular horizontal padding on the panorama side
    reference_wrap: bool = True
    reference_size: Tuple[int, int] = (128, 512)
    init_seed: int = 0

    @model_validator(mode="after")
    def _check_reference(self):
        d = self.backbone.downsample_factor
        h, w = self.reference_size
        if h % d or w % d:
            raise ValueError(f"reference_size {self.reference_size} must be a multiple of {d}")
        return self


# Training


class PhaseConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    optimizer: Literal["sgd", "adam"]
    lr: float = Field(ge=0.0)
    batch_size: int = Field(ge=1)
    epochs: int = Field(ge=0)
    # convergence: stop when val loss fails to improve by min_delta for patience epochs
    patience: int = Field(5, ge=1)
    min_delta: float = 1e-4


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    phase1: PhaseConfig = PhaseConfig(optimizer="sgd", lr=1e-2, batch_size=16, epochs=10)
    phase2a: PhaseConfig = PhaseConfig(optimizer="adam", lr=1e-3, batch_size=64, epochs=10)
    phase2b: PhaseConfig = PhaseConfig(optimizer="adam", lr=1e-5, batch_size=64, epochs=5)
    query_sizes: Tuple[int, ...] = QUERY_SIZES
    val_query_size: int = 224
    seed: int = 0
    clamp_eps: float = Field(1e-7, gt=0.0, lt=0.5)
    # batches are built from runs of up to this many samples sharing one panorama
    samples_per_reference: int = Field(4, ge=1)
    # start phase 1 from a mask detector thresholded at the target cell rate
    calibrate_masks: bool = True

    @model_validator(mode="after")
    def _check_balance(self):
        for name in ("phase2a", "phase2b"):
            batch = getattr(self, name).batch_size
            if batch % 2 or batch < 4:
                raise ValueError(
                    f"{name}.batch_size must be even and >= 4 for balanced batches, got {batch}"
                )
        if not self.query_sizes:
            raise ValueError("query_sizes must not be empty")
        return self


# Synthetic data


class AugmentRanges(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scale: Tuple[float, float] = (0.5, 2.0)
    # open interval (-shift, shift)
    shift: float = 0.2
    gamma: Tuple[float, float] = (0.5, 1.5)
    corner: float = 0.1


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    panorama_size: Tuple[int, int] = (128, 512)
    query_size: int = 256
    min_panorama: int = 64
    area_range: Tuple[float, float] = (0.04, 0.25)
    aspect_range: Tuple[float, float] = (0.5, 2.0)
    coverage: float = Field(0.5, gt=0.0, le=1.0)
    region_source: Literal["random", "buildings"] = "random"
    augment: AugmentRanges = AugmentRanges()
    val_fraction: float = Field(1 / 6, ge=0.0, lt=1.0)
    test_fraction: float = Field(1 / 6, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_fractions(self):
        if self.val_fraction + self.test_fraction >= 1.0:
            raise ValueError("val_fraction + test_fraction must leave room for training")
        return self


class BUPMConfig(BaseModel):
    """Full experiment bundle as stored in experiments/configs/*.json."""

    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    synth: SynthConfig = SynthConfig()
    seed: Optional[int] = None
    threads: Optional[int] = Field(None, ge=1)


# Helpers


def load_config(path: Optional[Path] = None) -> BUPMConfig:
    if path is None:
        return BUPMConfig()

    return BUPMConfig.model_validate(read_config_overrides(path))


def save_config(config: BUPMConfig, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)


def canonical_json(config: BaseModel) -> str:
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_digest(config: BaseModel) -> bytes:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).digest()


def _deep_merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def apply_overrides(config: BUPMConfig, overrides: dict) -> BUPMConfig:
    """Deep-merge a (partial) config dict over `config` and re-validate."""
    return BUPMConfig.model_validate(_deep_merge(config.model_dump(mode="json"), overrides))


def read_config_overrides(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path, "r") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"Config file {path} must hold a JSON object")
    return data
