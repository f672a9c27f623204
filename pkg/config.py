"""Run configuration: JSON file + command-line overrides, and environment lookups."""

from __future__ import annotations

import json
import os
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, model_validator

from data_io import CIFAR_STATS, PAD_ANCHORS, ChannelStats, Dataset, load_cifar10, synthetic_dataset
from model import ModelConfig
from shared import ValidationError, get_logger, load_env_var
from training import TrainConfig

logger = get_logger(__name__)

SYNTHETIC = "synthetic"


def resolve_threads(requested: Optional[int] = None) -> int:
    """Worker count from `requested` or REVIT_THREADS; 0 means one per CPU."""
    if requested is None:
        raw = load_env_var("REVIT_THREADS") or "0"
        try:
            requested = int(raw)
        except ValueError:
            raise ValidationError(f"REVIT_THREADS must be an integer, got {raw!r}") from None
    if requested < 0:
        raise ValidationError(f"thread count must be >= 0, got {requested}")
    return requested or (os.cpu_count() or 1)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # model
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 10
    variant: str = "revit"
    alpha_mode: str = "shared"
    seed: int = 0
    dropout: float = 0.0

    # training
    epochs: int = 10
    batch_size: int = 64
    base_lr: float = 1e-3
    warmup_epochs: int = 1
    weight_decay: float = 0.3
    grad_clip_norm: float = 1.0
    schedule: str = "cosine"
    max_steps: Optional[int] = None

    # data
    data: str = SYNTHETIC
    synthetic_train: int = 2048
    synthetic_test: int = 512
    synthetic_classes: int = 10
    synthetic_grid: Optional[int] = None
    synthetic_seed: int = 0
    normalize: bool = False
    pad_anchor: str = "top_left"

    out: str = "runs/latest"

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        self.to_model_config()
        self.to_train_config()
        if self.pad_anchor not in PAD_ANCHORS:
            raise ValueError(f"pad_anchor must be one of {PAD_ANCHORS}")
        if self.normalize and self.channels != len(CIFAR_STATS.mean):
            raise ValueError(f"normalize uses CIFAR-10 statistics and needs {len(CIFAR_STATS.mean)} channels")
        if self.data == SYNTHETIC and self.synthetic_classes > self.num_classes:
            raise ValueError(f"synthetic_classes {self.synthetic_classes} exceeds num_classes {self.num_classes}")
        return self

    @classmethod
    def load(
        cls,
        path: Optional[Union[str, Path]] = None,
        overrides: Optional[Dict[str, Any]] = None,
        base: Optional[Dict[str, Any]] = None,
    ) -> "RunConfig":
        """`base` values, then the config file, then non-None `overrides` on top."""
        data: Dict[str, Any] = dict(base or {})
        if path is not None:
            try:
                loaded = json.loads(Path(path).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
            if not isinstance(loaded, dict):
                raise ValidationError(f"{path}: config must be a JSON object")
            data.update(loaded)
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.model_validate(data)

    def _pick(self, target: type) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(target) if f.name in type(self).model_fields}

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(**self._pick(ModelConfig)).validate()

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(**self._pick(TrainConfig)).validate()

    def input_stats(self) -> Optional[ChannelStats]:
        """Normalisation applied to model inputs, after any perturbation."""
        return CIFAR_STATS if self.normalize else None

    def load_datasets(self) -> Tuple[Dataset, Dataset]:
        """Train and test splits in [0, 1] pixel space."""
        cfg = self.to_model_config()
        if self.data == SYNTHETIC:
            grid = self.synthetic_grid or cfg.grid
            common = dict(classes=self.synthetic_classes, grid=grid, image_size=cfg.image_size, channels=cfg.channels)
            train = synthetic_dataset(self.synthetic_seed, self.synthetic_train, split="train", **common)
            test = synthetic_dataset(self.synthetic_seed + 1, self.synthetic_test, split="test", **common)
            logger.info("synthetic data: %d train / %d test, %d classes", len(train), len(test), self.synthetic_classes)
        else:
            train, test = load_cifar10(self.data)
        return train, test
