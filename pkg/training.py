"""Optimisation loop, evaluation and the robustness / fixed-α sweeps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

import tensor_core as tc
from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from data_io import PERCENT_GRID, ChannelStats, Dataset, PerturbSpec, apply_perturbation
from model import ModelConfig, ModelParams, batched_logits, init_params, model_forward
from shared import NumericalError, TrainingDivergedError, ValidationError, get_logger
from tensor_core import Tensor

logger = get_logger(__name__)

SCHEDULES = ("cosine",)
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"
METRICS_FILE = "metrics.csv"


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    base_lr: float = 1e-3
    warmup_epochs: int = 1
    weight_decay: float = 0.3
    grad_clip_norm: float = 1.0
    seed: int = 0
    schedule: str = "cosine"
    max_steps: Optional[int] = None

    def validate(self) -> "TrainConfig":
        for name in ("epochs", "batch_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        for name in ("base_lr", "weight_decay", "grad_clip_norm"):
            value = getattr(self, name)
            if not value > 0 or not math.isfinite(value):
                raise ValidationError(f"{name} must be strictly positive, got {value!r}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValidationError(f"warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}")
        if self.schedule not in SCHEDULES:
            raise ValidationError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValidationError(f"max_steps must be positive when set, got {self.max_steps}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# optimiser


@dataclass
class OptimizerState:
    """Adam moments and hyperparameters; decay is decoupled from the gradient."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def create(cls, params: Dict[str, Tensor], **hyper: float) -> "OptimizerState":
        m = {name: np.zeros_like(p.data) for name, p in params.items()}
        v = {name: np.zeros_like(p.data) for name, p in params.items()}
        return cls(m, v, **hyper)

    def hyperparameters(self) -> Dict[str, Any]:
        return {
            "name": "adam",
            "t": self.t,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"optim.m.{n}": a for n, a in self.m.items()}
        out.update({f"optim.v.{n}": a for n, a in self.v.items()})
        return out

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "OptimizerState":
        if not ckpt.optimizer_meta:
            raise ValidationError("checkpoint carries no optimizer state")
        hyper = {k: v for k, v in ckpt.optimizer_meta.items() if k != "name"}
        names = ckpt.params.named_parameters()
        m = {n: ckpt.optimizer_arrays.get(f"optim.m.{n}", np.zeros_like(p.data)) for n, p in names.items()}
        v = {n: ckpt.optimizer_arrays.get(f"optim.v.{n}", np.zeros_like(p.data)) for n, p in names.items()}
        return cls(m, v, **hyper)


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, Optional[np.ndarray]],
    state: OptimizerState,
    lr: Optional[float] = None,
) -> OptimizerState:
    """One Adam update in place; a missing gradient counts as zero."""
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.t
    correction2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValidationError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        elif not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps) + lr * state.weight_decay * p.data
        p.data = (p.data - update).astype(p.data.dtype)
    return state


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int, total_steps: Optional[int] = None) -> float:
    """Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`."""
    if step < 0:
        raise ValidationError(f"step must be non-negative, got {step}")
    total = total_steps if total_steps is not None else cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    if warmup > 0 and step < warmup:
        return cfg.base_lr * step / warmup
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: Iterable[Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None))


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping."""
    params = list(params)
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
        logger.debug("clipped gradient norm %.4g to %.4g", norm, max_norm)
    return norm


# evaluation


@dataclass
class EvalResult:
    top1: float
    top5: float
    correct: int
    total: int


def _check_geometry(cfg: ModelConfig, dataset: Dataset) -> None:
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if dataset.image_shape != expected:
        raise ValidationError(f"dataset images {dataset.image_shape} do not match model geometry {expected}")
    if dataset.class_count > cfg.num_classes:
        raise ValidationError(f"dataset has {dataset.class_count} classes, model only {cfg.num_classes}")


def _resolve(model: Union[Checkpoint, str, Path]) -> Checkpoint:
    return model if isinstance(model, Checkpoint) else load_checkpoint(model)


def input_stats(ckpt: Checkpoint) -> Optional[ChannelStats]:
    """Input normalisation the checkpoint was trained with, if any."""
    return ChannelStats.from_dict(ckpt.extra.get("input_norm"))


def model_inputs(
    images: np.ndarray,
    perturb: Optional[PerturbSpec] = None,
    pad_anchor: str = "top_left",
    stats: Optional[ChannelStats] = None,
) -> np.ndarray:
    """Pixel-space images -> network inputs: perturb first, then normalise."""
    if perturb is not None:
        images = apply_perturbation(images, perturb, pad_anchor)
    return stats.apply(images) if stats is not None else images


def score_params(
    cfg: ModelConfig,
    params: ModelParams,
    dataset: Dataset,
    perturb: Optional[PerturbSpec] = None,
    pad_anchor: str = "top_left",
    threads: int = 1,
    batch_size: int = 256,
    stats: Optional[ChannelStats] = None,
) -> EvalResult:
    _check_geometry(cfg, dataset)
    images = model_inputs(dataset.images, perturb, pad_anchor, stats)
    logits = batched_logits(images, cfg, params, batch_size=batch_size, threads=threads)
    total = len(dataset)
    if total == 0:
        return EvalResult(0.0, 0.0, 0, 0)
    k = min(5, cfg.num_classes)
    topk = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    correct = int((topk[:, 0] == dataset.labels).sum())
    top5 = int((topk == dataset.labels[:, None]).any(axis=1).sum())
    return EvalResult(correct / total, top5 / total, correct, total)


def evaluate(
    model: Union[Checkpoint, str, Path],
    dataset: Dataset,
    perturb: Optional[PerturbSpec] = None,
    pad_anchor: str = "top_left",
    threads: int = 1,
) -> EvalResult:
    """Single-crop top-1 (and top-5) accuracy, optionally on perturbed images.

    `dataset` holds pixel-space images; the checkpoint's input normalisation
    is applied after the perturbation.
    """
    ckpt = _resolve(model)
    return score_params(ckpt.config, ckpt.params, dataset, perturb, pad_anchor, threads, stats=input_stats(ckpt))


def perturbation_sweep(
    model: Union[Checkpoint, str, Path],
    dataset: Dataset,
    mode: str,
    percents: Sequence[float] = PERCENT_GRID,
    pad_anchor: str = "top_left",
    threads: int = 1,
) -> pd.DataFrame:
    """Accuracy drop table: one row per percent, Δ against the clean accuracy."""
    ckpt = _resolve(model)
    stats = input_stats(ckpt)
    baseline = score_params(ckpt.config, ckpt.params, dataset, None, pad_anchor, threads, stats=stats).top1
    rows = []
    for percent in percents:
        spec = PerturbSpec(mode, percent).validate()
        top1 = score_params(ckpt.config, ckpt.params, dataset, spec, pad_anchor, threads, stats=stats).top1
        rows.append({"mode": mode, "percent": percent, "top1": top1, "baseline_top1": baseline, "delta": top1 - baseline})
    return pd.DataFrame(rows, columns=["mode", "percent", "top1", "baseline_top1", "delta"])


# training loop


@dataclass
class TrainResult:
    params: ModelParams
    metrics: pd.DataFrame
    best_checkpoint: Optional[Path]
    last_checkpoint: Path
    metrics_path: Path
    best_val: float
    steps: int
    batch_losses: List[float] = field(default_factory=list)


def metrics_columns(depth: int) -> List[str]:
    return ["epoch", "step", "lr", "train_loss", "train_acc", "val_acc"] + [f"alpha_{i}" for i in range(depth)]


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: Dataset,
    out_dir: Union[str, Path],
    val_set: Optional[Dataset] = None,
    params: Optional[ModelParams] = None,
    threads: int = 1,
    progress: bool = True,
    stats: Optional[ChannelStats] = None,
) -> TrainResult:
    """Train from scratch (or from `params`) and write checkpoints and metrics to `out_dir`.

    The best checkpoint is chosen by validation top-1 (train accuracy when
    no validation set is given). A non-finite loss or gradient aborts with
    `TrainingDivergedError`; checkpoints already written are left in place.
    `stats` normalises each batch of pixel-space images and is recorded in
    the checkpoints so evaluation rebuilds the same inputs.
    """
    model_cfg.validate()
    train_cfg.validate()
    _check_geometry(model_cfg, train_set)
    if val_set is not None:
        _check_geometry(model_cfg, val_set)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / METRICS_FILE

    params = params or init_params(model_cfg)
    named = params.named_parameters()
    state = OptimizerState.create(named, lr=train_cfg.base_lr, weight_decay=train_cfg.weight_decay)
    data_rng = np.random.default_rng(train_cfg.seed)
    drop_rng = np.random.default_rng(train_cfg.seed + 1) if model_cfg.dropout > 0 else None

    steps_per_epoch = math.ceil(len(train_set) / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    if train_cfg.max_steps is not None:
        total_steps = min(total_steps, train_cfg.max_steps)
    logger.info(
        "training %s (%s) for %d steps on %d images",
        model_cfg.variant, model_cfg.alpha_mode, total_steps, len(train_set),
    )

    rows: List[Dict[str, float]] = []
    batch_losses: List[float] = []
    best_val, best_path, step = -1.0, None, 0
    provenance = {"input_norm": stats.to_dict() if stats is not None else None}
    for epoch in range(1, train_cfg.epochs + 1):
        loss_sum = 0.0
        correct = seen = 0
        lr = lr_at(step, train_cfg, steps_per_epoch, total_steps)
        batches = tqdm(
            train_set.batches(train_cfg.batch_size, data_rng),
            total=steps_per_epoch,
            desc=f"epoch {epoch}/{train_cfg.epochs}",
            disable=not progress,
            leave=False,
        )
        for images, labels in batches:
            if step >= total_steps:
                break
            params.zero_grad()
            try:
                with tc.ComputationTape():
                    inputs = stats.apply(images) if stats is not None else images
                    logits = model_forward(inputs, model_cfg, params, rng=drop_rng).logits
                    loss = tc.cross_entropy(logits, labels)
                    tc.backward(loss)
                clip_grad_norm(named.values(), train_cfg.grad_clip_norm)
                lr = lr_at(step + 1, train_cfg, steps_per_epoch, total_steps)
                adam_step(named, {n: p.grad for n, p in named.items()}, state, lr)
            except NumericalError as exc:
                kept = best_path or "none written yet"
                logger.error("diverged at step %d: %s (last good checkpoint: %s)", step + 1, exc, kept)
                raise TrainingDivergedError(f"training diverged at step {step + 1}: {exc}") from exc
            step += 1
            value = loss.item()
            batch_losses.append(value)
            loss_sum += value * len(labels)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(labels)
            batches.set_postfix(loss=f"{value:.4f}")

        if seen == 0:
            break
        train_acc = correct / seen
        val_acc = (
            score_params(model_cfg, params, val_set, threads=threads, stats=stats).top1
            if val_set is not None
            else float("nan")
        )
        row = {
            "epoch": epoch,
            "step": step,
            "lr": lr,
            "train_loss": loss_sum / seen,
            "train_acc": train_acc,
            "val_acc": val_acc,
        }
        row.update({f"alpha_{i}": a for i, a in enumerate(params.alpha_values(model_cfg.depth))})
        rows.append(row)
        pd.DataFrame(rows, columns=metrics_columns(model_cfg.depth)).to_csv(metrics_path, index=False)

        selector = train_acc if val_set is None else val_acc
        if selector > best_val:
            best_val = selector
            best_path = save_checkpoint(
                out / BEST_CHECKPOINT, model_cfg, params, state,
                extra={**provenance, "epoch": epoch, "step": step, "score": selector},
            )
        logger.info(
            "epoch %d step %d loss %.4f train_acc %.4f val_acc %.4f",
            epoch, step, row["train_loss"], train_acc, val_acc,
        )
        if step >= total_steps:
            break

    last = save_checkpoint(out / LAST_CHECKPOINT, model_cfg, params, state, extra={**provenance, "step": step})
    metrics = pd.DataFrame(rows, columns=metrics_columns(model_cfg.depth))
    return TrainResult(params, metrics, best_path, last, metrics_path, best_val, step, batch_losses)


def sweep_fixed_alpha(
    values: Sequence[float],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: Dataset,
    out_dir: Union[str, Path],
    val_set: Optional[Dataset] = None,
    threads: int = 1,
    progress: bool = False,
    stats: Optional[ChannelStats] = None,
) -> pd.DataFrame:
    """Train one ReViT per fixed α and tabulate the outcome."""
    rows = []
    for value in values:
        cfg = replace(model_cfg, variant="revit", alpha_mode=f"fixed:{value:g}").validate()
        out = Path(out_dir) / f"alpha_{value:g}"
        result = train(cfg, train_cfg, train_set, out, val_set, threads=threads, progress=progress, stats=stats)
        last = result.metrics.iloc[-1]
        rows.append(
            {
                "alpha": float(value),
                "train_loss": float(last["train_loss"]),
                "train_acc": float(last["train_acc"]),
                "val_acc": float(last["val_acc"]),
            }
        )
        logger.info("fixed alpha %g: train_acc %.4f val_acc %.4f", value, last["train_acc"], last["val_acc"])
    return pd.DataFrame(rows, columns=["alpha", "train_loss", "train_acc", "val_acc"])
