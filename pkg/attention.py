"""Scaled dot-product attention, multi-head assembly and residual attention.

Residual attention mixes the pre-softmax scores of the current layer with
the scores handed over by the previous layer:

    S_0 = Q_0 K_0ᵀ / √d
    S_l = α·(Q_l K_lᵀ / √d) + (1 − α)·S_{l−1}        (l > 0)

The mixed scores of layer l are what layer l+1 receives. The gate α is
shared across heads; it is either one learned scalar, one learned scalar
per layer, or a fixed constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

import tensor_core as tc
from shared import ContractError, DimensionError, ValidationError
from tensor_core import Tensor

ALPHA_MODES = ("shared", "per_layer", "fixed")

Alpha = Union[Tensor, float]


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor
    b_k: Tensor
    b_v: Tensor
    b_o: Tensor
    heads: int

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def validate(self) -> None:
        dim = self.dim
        if self.heads < 1 or dim % self.heads:
            raise ValidationError(f"dim {dim} is not divisible by heads {self.heads}")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = getattr(self, name)
            if w.shape != (dim, dim):
                raise DimensionError(f"{name} has shape {w.shape}, expected {(dim, dim)}")
        for name in ("b_q", "b_k", "b_v", "b_o"):
            b = getattr(self, name)
            if b.shape != (dim,):
                raise DimensionError(f"{name} has shape {b.shape}, expected {(dim,)}")

    def named(self, prefix: str) -> Dict[str, Tensor]:
        names = ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o")
        return {f"{prefix}.{n}": getattr(self, n) for n in names}


@dataclass
class ScoreState:
    """Post-residual scores of one layer, handed to the next layer."""

    scores: Tensor
    layer_index: int


@dataclass(frozen=True)
class AlphaMode:
    kind: str
    value: Optional[float] = None

    @classmethod
    def parse(cls, text: Union[str, "AlphaMode"]) -> "AlphaMode":
        if isinstance(text, AlphaMode):
            return text
        raw = str(text).strip().lower().replace("-", "_")
        if raw in ("shared", "per_layer"):
            return cls(raw)
        if raw.startswith("fixed"):
            _, _, number = raw.partition(":")
            if not number:
                _, _, number = raw.partition("(")
                number = number.rstrip(")")
            try:
                value = float(number)
            except ValueError:
                raise ValidationError(f"fixed alpha needs a value, e.g. fixed:0.75 (got {text!r})") from None
            return cls("fixed", value).validated()
        raise ValidationError(f"unknown alpha mode {text!r}; use shared, per_layer or fixed:<value>")

    def validated(self) -> "AlphaMode":
        if self.kind not in ALPHA_MODES:
            raise ValidationError(f"unknown alpha mode {self.kind!r}")
        if self.kind == "fixed" and (self.value is None or not 0.0 <= self.value <= 1.0):
            raise ValidationError(f"fixed alpha must lie in [0, 1], got {self.value}")
        return self

    def __str__(self) -> str:
        return f"fixed:{self.value:g}" if self.kind == "fixed" else self.kind


class AlphaGate:
    """Gate α of the residual attention, α = logistic(raw) when learned."""

    def __init__(self, mode: AlphaMode, depth: int, raw: Optional[Tensor] = None) -> None:
        self.mode = mode.validated()
        self.depth = depth
        if mode.kind == "fixed":
            self.raw = None
        else:
            width = 1 if mode.kind == "shared" else depth
            if raw is None:
                raw = tc.parameter(np.zeros(width), name="alpha.raw")
            if raw.shape != (width,):
                raise DimensionError(f"alpha.raw has shape {raw.shape}, expected {(width,)} for {mode}")
            self.raw = raw

    @property
    def trainable(self) -> bool:
        return self.raw is not None

    def alpha(self, layer: int) -> Alpha:
        if self.raw is None:
            return float(self.mode.value)
        if self.mode.kind == "shared":
            return tc.sigmoid(self.raw)
        return tc.sigmoid(self.raw[layer : layer + 1])

    def values(self) -> List[float]:
        """Effective α for every layer."""
        if self.raw is None:
            return [float(self.mode.value)] * self.depth
        with tc.no_grad():
            alphas = tc.sigmoid(self.raw).data.astype(np.float64)
        if self.mode.kind == "shared":
            return [float(alphas[0])] * self.depth
        return [float(a) for a in alphas]

    def named(self) -> Dict[str, Tensor]:
        return {} if self.raw is None else {"alpha.raw": self.raw}


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, dim = x.shape
    if dim % heads:
        raise DimensionError(f"feature width {dim} is not divisible by {heads} heads")
    return x.reshape(*lead, n, heads, dim // heads).swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, n, d = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, heads * d)


def raw_scores(q: Tensor, k: Tensor) -> Tensor:
    if q.shape != k.shape:
        raise DimensionError(f"raw_scores: query {q.shape} and key {k.shape} differ")
    return tc.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))


def residual_scores(s_cur: Tensor, prev: Optional[ScoreState], alpha: Alpha, layer_index: int) -> Tensor:
    if layer_index == 0:
        return s_cur
    if prev is None:
        raise ContractError(f"layer {layer_index} needs the score state of layer {layer_index - 1}")
    if prev.scores.shape != s_cur.shape:
        raise DimensionError(f"residual_scores: current {s_cur.shape} vs previous {prev.scores.shape}")
    return alpha * s_cur + (1.0 - alpha) * prev.scores


def attention_weights(scores: Tensor) -> Tensor:
    return tc.softmax_lastdim(scores)


def attend(weights: Tensor, values: Tensor) -> Tensor:
    n = weights.shape[-1]
    if weights.shape[-2] != n or values.shape[-2] != n or weights.shape[:-2] != values.shape[:-2]:
        raise DimensionError(f"attend: weights {weights.shape} do not match values {values.shape}")
    return tc.matmul(weights, values)


def mhsa_forward(
    x: Tensor,
    p: AttentionParams,
    prev: Optional[ScoreState],
    gate: Optional[AlphaGate],
    layer: int,
) -> Tuple[Tensor, ScoreState, Tensor]:
    """Multi-head self-attention over tokens `x` ([..., N, dim]).

    With `gate=None` the layer is a plain ViT layer and `prev` is ignored.
    Returns the projected output, the score state for the next layer and
    the attention weights of this layer.
    """
    if x.shape[-1] != p.dim:
        raise DimensionError(f"mhsa: tokens {x.shape} do not match attention width {p.dim}")
    q = split_heads(tc.matmul(x, p.w_q) + p.b_q, p.heads)
    k = split_heads(tc.matmul(x, p.w_k) + p.b_k, p.heads)
    v = split_heads(tc.matmul(x, p.w_v) + p.b_v, p.heads)

    scores = raw_scores(q, k)
    if gate is not None:
        scores = residual_scores(scores, prev, gate.alpha(layer), layer)
    weights = attention_weights(scores)
    mixed = merge_heads(attend(weights, v))
    out = tc.matmul(mixed, p.w_o) + p.b_o
    return out, ScoreState(scores, layer), weights
