"""Diagnostics over captured forward passes.

Non-locality of a head is the attention-weighted mean patch-grid distance
between each query patch and the keys it attends to, averaged over query
patches. The class token has no grid position: its row and column are
removed and the remaining rows renormalised before the sum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

import tensor_core as tc
from checkpoint import Checkpoint
from model import ModelConfig, ModelParams, model_forward
from shared import DimensionError, ValidationError, get_logger

logger = get_logger(__name__)

STOCHASTIC_TOL = 1e-4
CLASS_TOKEN_HANDLING = "stripped_and_renormalized"
FLOAT_FORMAT = "%.9g"


@dataclass(frozen=True)
class DistanceMatrix:
    grid: int
    delta: np.ndarray

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def max_distance(self) -> float:
        return float(self.delta.max())


def build_distance_matrix(grid: int) -> DistanceMatrix:
    """Euclidean distances between patch positions, in patch units."""
    if grid < 1:
        raise ValidationError(f"grid must be at least 1, got {grid}")
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    coords = np.stack([rows, cols], axis=1).astype(np.float64)
    return DistanceMatrix(grid, cdist(coords, coords))


def patch_attention(attn: np.ndarray, dm: DistanceMatrix) -> np.ndarray:
    """Row-stochastic maps over patches only.

    `attn` is [..., N, N] over either the full token set (class token at
    index 0, stripped here) or the patch set alone.
    """
    a = np.asarray(attn, dtype=np.float64)
    n_p = dm.num_patches
    if a.shape[-2:] not in ((n_p, n_p), (n_p + 1, n_p + 1)):
        raise DimensionError(f"attention maps {a.shape} do not fit a {dm.grid}x{dm.grid} patch grid")
    if (a < -STOCHASTIC_TOL).any() or np.abs(a.sum(axis=-1) - 1.0).max() > STOCHASTIC_TOL:
        raise ValidationError(f"attention rows are not stochastic within {STOCHASTIC_TOL}")
    if a.shape[-1] == n_p:
        return a
    a = a[..., 1:, 1:]
    mass = a.sum(axis=-1, keepdims=True)
    return np.divide(a, mass, out=np.zeros_like(a), where=mass > 0)


def _distance_weighted(patch_maps: np.ndarray, dm: DistanceMatrix) -> np.ndarray:
    return (patch_maps * dm.delta).sum(axis=(-1, -2)) / dm.num_patches


def non_locality_head(attn: np.ndarray, dm: DistanceMatrix) -> float:
    return float(_distance_weighted(patch_attention(attn, dm), dm))


def non_locality_layer(attn: np.ndarray, dm: DistanceMatrix) -> Tuple[List[float], float]:
    """Per-head values for one layer ([H, N, N]) and their mean."""
    if np.ndim(attn) != 3:
        raise DimensionError(f"expected one layer of maps [H, N, N], got shape {np.shape(attn)}")
    heads = _distance_weighted(patch_attention(attn, dm), dm)
    return [float(v) for v in heads], float(heads.mean())


def revit_globality_decomposition(
    attn_cur: np.ndarray, attn_prev: np.ndarray, alpha: float, dm: DistanceMatrix
) -> float:
    """Non-locality of α·A_cur + (1−α)·A_prev."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    cur = patch_attention(attn_cur, dm)
    prev = patch_attention(attn_prev, dm)
    if cur.shape != prev.shape:
        raise DimensionError(f"decomposition maps differ: {cur.shape} vs {prev.shape}")
    return float(_distance_weighted(alpha * cur + (1.0 - alpha) * prev, dm))


def feature_similarity(features: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of token features [N, dim]; zero rows give 0."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"feature_similarity expects [N, dim], got {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    if zero.any():
        logger.info("%d zero-norm feature rows; their similarities are set to 0", int(zero.sum()))
    unit = np.divide(x, norms[:, None], out=np.zeros_like(x), where=~zero[:, None])
    sim = unit @ unit.T
    np.fill_diagonal(sim, np.where(zero, 0.0, 1.0))
    return sim


def similarity_profile(features: np.ndarray, skip_class_token: bool = True) -> np.ndarray:
    """Mean off-diagonal similarity per layer.

    `features` is [L, N, dim] or [L, B, N, dim]; batches are averaged.
    """
    f = np.asarray(features)
    if f.ndim == 3:
        f = f[:, None]
    if f.ndim != 4:
        raise DimensionError(f"similarity_profile expects [L, (B,) N, dim], got {np.shape(features)}")
    if skip_class_token:
        f = f[:, :, 1:]
    n = f.shape[2]
    if n < 2:
        return np.zeros(f.shape[0])
    off = ~np.eye(n, dtype=bool)
    return np.array([np.mean([feature_similarity(img)[off].mean() for img in layer]) for layer in f])


# reports


@dataclass
class AlphaReport:
    model: str
    mode: str
    values: List[float] = field(default_factory=list)
    notice: Optional[str] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"model": self.model, "layer": range(len(self.values)), "alpha": self.values},
            columns=["model", "layer", "alpha"],
        )


def alpha_report(ckpt: Checkpoint, tag: Optional[str] = None) -> AlphaReport:
    cfg = ckpt.config
    tag = tag or cfg.variant
    if not cfg.uses_residual_attention:
        notice = "vit checkpoint has no residual attention gate; alpha report is empty"
        logger.warning(notice)
        return AlphaReport(tag, "none", [], notice)
    return AlphaReport(tag, cfg.alpha_mode, ckpt.params.alpha_values(cfg.depth))


@dataclass
class NonLocalityReport:
    model: str
    per_head: np.ndarray
    samples: int
    grid: int
    decomposed: Optional[np.ndarray] = None
    class_token: str = CLASS_TOKEN_HANDLING

    @property
    def per_layer(self) -> np.ndarray:
        return self.per_head.mean(axis=1)

    @property
    def decomposition_gap(self) -> Optional[np.ndarray]:
        return None if self.decomposed is None else self.decomposed - self.per_layer

    def validate(self, dm: DistanceMatrix) -> "NonLocalityReport":
        if self.per_head.ndim != 2:
            raise DimensionError(f"per-head values must be [L, H], got {self.per_head.shape}")
        if (self.per_head < -1e-9).any() or (self.per_head > dm.max_distance + 1e-9).any():
            raise ValidationError(f"non-locality outside [0, {dm.max_distance:.4f}]")
        return self

    def head_frame(self) -> pd.DataFrame:
        layers, heads = np.indices(self.per_head.shape)
        return pd.DataFrame(
            {"model": self.model, "layer": layers.ravel(), "head": heads.ravel(), "D": self.per_head.ravel()}
        )

    def layer_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"model": self.model, "layer": range(len(self.per_layer)), "D_layer": self.per_layer})
        if self.decomposed is not None:
            frame["D_decomposed"] = self.decomposed
            frame["gap"] = self.decomposition_gap
        return frame

    def summary(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "model": self.model,
            "samples": self.samples,
            "grid": self.grid,
            "class_token": self.class_token,
            "D_layer": [float(v) for v in self.per_layer],
        }
        if self.decomposed is not None:
            out["D_decomposed"] = [None if np.isnan(v) else float(v) for v in self.decomposed]
        return out


def _captures(images: np.ndarray, cfg: ModelConfig, params: ModelParams, batch_size: int):
    with tc.no_grad():
        for start in range(0, len(images), batch_size):
            yield model_forward(images[start : start + batch_size], cfg, params, capture=True)


def collect_non_locality(
    cfg: ModelConfig,
    params: ModelParams,
    images: np.ndarray,
    tag: Optional[str] = None,
    batch_size: int = 32,
) -> NonLocalityReport:
    """Average non-locality per layer and head over `images` ([M, C, H, W]).

    For residual-attention models each layer l > 0 also gets the value of
    the mixed map α·A_cur + (1−α)·A_{l−1}, where A_cur is the softmax of the
    layer's own unmixed scores. Its gap to the exact value is logged.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValidationError("non-locality needs at least one image")
    dm = build_distance_matrix(cfg.grid)
    alphas = params.alpha_values(cfg.depth)
    residual = cfg.uses_residual_attention
    head_sum = np.zeros((cfg.depth, cfg.heads))
    decomposed_sum = np.zeros(cfg.depth)
    for record in _captures(images, cfg, params, batch_size):
        attn = np.stack(record.attentions)  # [L, B, H, N, N]
        head_sum += _distance_weighted(patch_attention(attn, dm), dm).sum(axis=1)
        if not residual:
            continue
        scores = np.stack(record.scores).astype(np.float64)
        for layer in range(1, cfg.depth):
            a = alphas[layer]
            if a > 0:
                own = (scores[layer] - (1.0 - a) * scores[layer - 1]) / a
                cur = tc.softmax_lastdim(tc.Tensor(own)).data
            else:
                cur = attn[layer - 1]
            mixed = a * patch_attention(cur, dm) + (1.0 - a) * patch_attention(attn[layer - 1], dm)
            decomposed_sum[layer] += _distance_weighted(mixed, dm).mean(axis=-1).sum()

    m = len(images)
    decomposed = None
    if residual:
        decomposed = decomposed_sum / m
        decomposed[0] = np.nan
    report = NonLocalityReport(tag or cfg.variant, head_sum / m, m, cfg.grid, decomposed).validate(dm)
    if decomposed is not None and cfg.depth > 1:
        logger.info(
            "%s: mixed-map non-locality differs from the exact value by at most %.4g",
            report.model, float(np.nanmax(np.abs(report.decomposition_gap))),
        )
    logger.debug("%s: class token %s", report.model, CLASS_TOKEN_HANDLING)
    return report


def collect_similarity(
    cfg: ModelConfig, params: ModelParams, images: np.ndarray, batch_size: int = 32
) -> Tuple[List[List[np.ndarray]], np.ndarray]:
    """Patch-token similarity matrices per image per layer, and the per-layer profile."""
    matrices: List[List[np.ndarray]] = []
    features = []
    for record in _captures(np.asarray(images), cfg, params, batch_size):
        stack = record.feature_stack()  # [L, B, N, dim]
        features.append(stack)
        for b in range(stack.shape[1]):
            matrices.append([feature_similarity(stack[l, b, 1:]) for l in range(cfg.depth)])
    profile = similarity_profile(np.concatenate(features, axis=1))
    return matrices, profile


def compare_reports(a: NonLocalityReport, b: NonLocalityReport) -> pd.DataFrame:
    if a.per_head.shape[0] != b.per_head.shape[0]:
        raise DimensionError(f"reports have {a.per_head.shape[0]} and {b.per_head.shape[0]} layers")
    return pd.DataFrame(
        {
            "layer": range(len(a.per_layer)),
            f"D_{a.model}": a.per_layer,
            f"D_{b.model}": b.per_layer,
            "difference": b.per_layer - a.per_layer,
        }
    )


def observe_non_locality_order(reference: NonLocalityReport, residual: NonLocalityReport) -> bool:
    """Log whether `residual` stays less global than `reference` past the first layer."""
    lower = bool((residual.per_layer[1:] < reference.per_layer[1:]).all())
    logger.info(
        "observation: %s non-locality %s below %s on every layer after the first",
        residual.model, "stays" if lower else "does not stay", reference.model,
    )
    return lower


def observe_feature_collapse(reference: np.ndarray, residual: np.ndarray, names: Sequence[str] = ("vit", "revit")) -> bool:
    """Log whether the second profile ends with less similar (less collapsed) features."""
    less = bool(residual[-1] < reference[-1])
    logger.info(
        "observation: final-layer patch similarity %s=%.4f %s=%.4f (%s collapsed)",
        names[0], reference[-1], names[1], residual[-1], names[1] + " less" if less else names[0] + " less",
    )
    return less


# writers


def write_non_locality(report: NonLocalityReport, out_dir: Union[str, Path]) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "heads": out / f"{report.model}_nonlocality_heads.csv",
        "layers": out / f"{report.model}_nonlocality_layers.csv",
        "summary": out / f"{report.model}_nonlocality.json",
    }
    report.head_frame().to_csv(paths["heads"], index=False, float_format=FLOAT_FORMAT)
    report.layer_frame().to_csv(paths["layers"], index=False, float_format=FLOAT_FORMAT)
    paths["summary"].write_text(json.dumps(report.summary(), indent=2))
    return paths


def write_similarity(
    matrices: List[List[np.ndarray]], profile: np.ndarray, out_dir: Union[str, Path], tag: str
) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, layers in enumerate(matrices):
        for l, sim in enumerate(layers):
            path = out / f"{tag}_similarity_img{i}_layer{l}.csv"
            pd.DataFrame(sim).to_csv(path, index=False, header=False, float_format=FLOAT_FORMAT)
            written.append(path)
    summary = {"model": tag, "images": len(matrices), "mean_offdiag_similarity": [float(v) for v in profile]}
    (out / f"{tag}_similarity.json").write_text(json.dumps(summary, indent=2))
    return written


def write_alpha_report(report: AlphaReport, out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{report.model}_alpha.csv"
    report.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path
