"""Vision transformer encoder with optional residual attention (ReViT).

Tokens are the flattened non-overlapping patches, linearly projected, with
a learned class token prepended and learned absolute positional embeddings
added. Blocks are pre-norm: LN → MHSA → +x, LN → MLP(GELU) → +x. The
classification head reads the class token after a final LN.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.stats import truncnorm

import tensor_core as tc
from attention import AlphaGate, AlphaMode, AttentionParams, ScoreState, mhsa_forward
from shared import DimensionError, ValidationError, get_logger
from tensor_core import Tensor

logger = get_logger(__name__)

VARIANTS = ("vit", "revit")
INIT_STD = 0.02

ImageInput = Union[np.ndarray, Tensor]


@dataclass
class ModelConfig:
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

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    @property
    def alpha(self) -> AlphaMode:
        return AlphaMode.parse(self.alpha_mode)

    @property
    def uses_residual_attention(self) -> bool:
        return self.variant == "revit"

    def validate(self) -> "ModelConfig":
        for name in ("image_size", "patch_size", "channels", "dim", "depth", "heads", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size:
            raise ValidationError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ValidationError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0 or self.mlp_hidden < 1:
            raise ValidationError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")
        self.alpha_mode = str(self.alpha)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    attn: AttentionParams
    ln2_gamma: Tensor
    ln2_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def named(self, prefix: str) -> Dict[str, Tensor]:
        out = {f"{prefix}.ln1.gamma": self.ln1_gamma, f"{prefix}.ln1.beta": self.ln1_beta}
        out.update(self.attn.named(f"{prefix}.attn"))
        out.update(
            {
                f"{prefix}.ln2.gamma": self.ln2_gamma,
                f"{prefix}.ln2.beta": self.ln2_beta,
                f"{prefix}.mlp.w1": self.mlp_w1,
                f"{prefix}.mlp.b1": self.mlp_b1,
                f"{prefix}.mlp.w2": self.mlp_w2,
                f"{prefix}.mlp.b2": self.mlp_b2,
            }
        )
        return out


@dataclass
class ModelParams:
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos_embed: Tensor
    blocks: List[BlockParams]
    norm_gamma: Tensor
    norm_beta: Tensor
    head_w: Tensor
    head_b: Tensor
    gate: Optional[AlphaGate] = None

    def named_parameters(self) -> Dict[str, Tensor]:
        """Every tensor of the model, trainable or not, keyed by stable names."""
        out = {
            "patch.w": self.patch_w,
            "patch.b": self.patch_b,
            "cls_token": self.cls_token,
            "pos_embed": self.pos_embed,
        }
        for i, block in enumerate(self.blocks):
            out.update(block.named(f"blocks.{i}"))
        out.update({"norm.gamma": self.norm_gamma, "norm.beta": self.norm_beta})
        out.update({"head.w": self.head_w, "head.b": self.head_b})
        if self.gate is not None:
            out.update(self.gate.named())
        return out

    def alpha_values(self, depth: int) -> List[float]:
        """Effective α per layer; a plain ViT behaves as α = 1 everywhere."""
        return [1.0] * depth if self.gate is None else self.gate.values()

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.zero_grad()


def expected_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    dim, hidden = cfg.dim, cfg.mlp_hidden
    shapes: Dict[str, Tuple[int, ...]] = {
        "patch.w": (cfg.channels * cfg.patch_size * cfg.patch_size, dim),
        "patch.b": (dim,),
        "cls_token": (dim,),
        "pos_embed": (cfg.num_tokens, dim),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        shapes.update({f"{p}.ln1.gamma": (dim,), f"{p}.ln1.beta": (dim,)})
        for n in ("w_q", "w_k", "w_v", "w_o"):
            shapes[f"{p}.attn.{n}"] = (dim, dim)
        for n in ("b_q", "b_k", "b_v", "b_o"):
            shapes[f"{p}.attn.{n}"] = (dim,)
        shapes.update(
            {
                f"{p}.ln2.gamma": (dim,),
                f"{p}.ln2.beta": (dim,),
                f"{p}.mlp.w1": (dim, hidden),
                f"{p}.mlp.b1": (hidden,),
                f"{p}.mlp.w2": (hidden, dim),
                f"{p}.mlp.b2": (dim,),
            }
        )
    shapes.update({"norm.gamma": (dim,), "norm.beta": (dim,)})
    shapes.update({"head.w": (dim, cfg.num_classes), "head.b": (cfg.num_classes,)})
    alpha = cfg.alpha
    if cfg.uses_residual_attention and alpha.kind != "fixed":
        shapes["alpha.raw"] = (1,) if alpha.kind == "shared" else (cfg.depth,)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in expected_shapes(cfg).values()))


def params_from_arrays(cfg: ModelConfig, arrays: Dict[str, np.ndarray]) -> ModelParams:
    """Assemble `ModelParams` from named arrays, checking names and shapes."""
    shapes = expected_shapes(cfg)
    unknown = sorted(set(arrays) - set(shapes))
    if unknown:
        raise ValidationError(f"unknown tensor names for this config: {unknown}")
    missing = sorted(set(shapes) - set(arrays))
    if missing:
        raise ValidationError(f"missing tensors for this config: {missing}")
    t: Dict[str, Tensor] = {}
    for name, shape in shapes.items():
        arr = np.asarray(arrays[name])
        if tuple(arr.shape) != shape:
            raise DimensionError(f"{name} has shape {tuple(arr.shape)}, expected {shape}")
        t[name] = tc.parameter(arr, name=name)

    blocks = []
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        attn = AttentionParams(
            *(t[f"{p}.attn.{n}"] for n in ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o")),
            heads=cfg.heads,
        )
        attn.validate()
        blocks.append(
            BlockParams(
                t[f"{p}.ln1.gamma"], t[f"{p}.ln1.beta"], attn,
                t[f"{p}.ln2.gamma"], t[f"{p}.ln2.beta"],
                t[f"{p}.mlp.w1"], t[f"{p}.mlp.b1"], t[f"{p}.mlp.w2"], t[f"{p}.mlp.b2"],
            )
        )
    gate = None
    if cfg.uses_residual_attention:
        gate = AlphaGate(cfg.alpha, cfg.depth, t.get("alpha.raw"))
    return ModelParams(
        t["patch.w"], t["patch.b"], t["cls_token"], t["pos_embed"], blocks,
        t["norm.gamma"], t["norm.beta"], t["head.w"], t["head.b"], gate,
    )


def init_params(cfg: ModelConfig, seed: Optional[int] = None) -> ModelParams:
    """Deterministic initialisation.

    Weights are drawn from a normal truncated at ±2σ (σ = 0.02); biases and
    LN shifts are zero, LN scales one; class token and positional embedding
    are N(0, 0.02); the raw α parameters are 0 (α = 0.5).
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dist = truncnorm(-2.0, 2.0, loc=0.0, scale=INIT_STD)
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("cls_token", "pos_embed"):
            arrays[name] = rng.normal(0.0, INIT_STD, size=shape)
        elif name == "alpha.raw" or leaf in ("b", "beta") or leaf.startswith("b_") or leaf in ("b1", "b2"):
            arrays[name] = np.zeros(shape)
        elif leaf == "gamma":
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = dist.rvs(size=shape, random_state=rng)
    return params_from_arrays(cfg, arrays)


@dataclass
class ForwardRecord:
    logits: Tensor
    attentions: List[np.ndarray] = field(default_factory=list)
    features: List[np.ndarray] = field(default_factory=list)
    scores: List[np.ndarray] = field(default_factory=list)

    @property
    def captured(self) -> bool:
        return bool(self.attentions)

    def attention_stack(self) -> np.ndarray:
        """[L, ..., H, N, N]"""
        return np.stack(self.attentions)

    def feature_stack(self) -> np.ndarray:
        """[L, ..., N, dim]"""
        return np.stack(self.features)


def _as_batch(images: ImageInput, cfg: ModelConfig) -> Tuple[np.ndarray, bool]:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if arr.ndim != 4 or tuple(arr.shape[1:]) != expected:
        raise DimensionError(f"images of shape {tuple(arr.shape)} do not match [channels, H, W] = {expected}")
    return arr.astype(tc.get_default_dtype(), copy=False), single


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, (H/p)·(W/p), C·p·p], row-major over the patch grid."""
    b, c, h, w = images.shape
    g_h, g_w = h // patch, w // patch
    x = images.reshape(b, c, g_h, patch, g_w, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g_h * g_w, c * patch * patch)


def patch_embed(images: ImageInput, cfg: ModelConfig, params: ModelParams) -> Tensor:
    batch, single = _as_batch(images, cfg)
    tokens = tc.matmul(Tensor(patchify(batch, cfg.patch_size)), params.patch_w) + params.patch_b
    cls = params.cls_token.reshape(1, 1, cfg.dim).broadcast_to((batch.shape[0], 1, cfg.dim))
    x = tc.concat([cls, tokens], axis=1) + params.pos_embed
    return x[0] if single else x


def block_forward(
    x: Tensor,
    block: BlockParams,
    prev: Optional[ScoreState],
    layer: int,
    gate: Optional[AlphaGate],
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, ScoreState, Tensor]:
    """One pre-norm block. `gate=None` gives a plain ViT block."""
    h = tc.layer_norm(x, block.ln1_gamma, block.ln1_beta)
    attn_out, state, weights = mhsa_forward(h, block.attn, prev, gate, layer)
    x = x + tc.dropout(attn_out, dropout, rng)
    h = tc.layer_norm(x, block.ln2_gamma, block.ln2_beta)
    hidden = tc.gelu(tc.matmul(h, block.mlp_w1) + block.mlp_b1)
    x = x + tc.dropout(tc.matmul(hidden, block.mlp_w2) + block.mlp_b2, dropout, rng)
    return x, state, weights


def encode_tokens(
    tokens: Tensor,
    cfg: ModelConfig,
    params: ModelParams,
    capture: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, ForwardRecord]:
    """Run the block stack; the returned record has no logits yet."""
    record = ForwardRecord(logits=tokens)
    gate = params.gate if cfg.uses_residual_attention else None
    state: Optional[ScoreState] = None
    x = tokens
    for layer, block in enumerate(params.blocks):
        x, state, weights = block_forward(x, block, state, layer, gate, cfg.dropout, rng)
        if capture:
            record.attentions.append(weights.data.copy())
            record.features.append(x.data.copy())
            record.scores.append(state.scores.data.copy())
    return x, record


def model_forward(
    images: ImageInput,
    cfg: ModelConfig,
    params: ModelParams,
    capture: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> ForwardRecord:
    tokens = patch_embed(images, cfg, params)
    x, record = encode_tokens(tokens, cfg, params, capture, rng)
    x = tc.layer_norm(x, params.norm_gamma, params.norm_beta)
    if x.ndim == 2:
        cls = x[0:1]
        record.logits = (tc.matmul(cls, params.head_w) + params.head_b).reshape(cfg.num_classes)
    else:
        record.logits = tc.matmul(x[:, 0], params.head_w) + params.head_b
    return record


def batched_logits(
    images: np.ndarray,
    cfg: ModelConfig,
    params: ModelParams,
    batch_size: int = 256,
    threads: int = 1,
) -> np.ndarray:
    """Logits for a stack of images, chunks evaluated concurrently."""
    dtype = tc.get_default_dtype()
    chunks = [images[i : i + batch_size] for i in range(0, len(images), batch_size)]

    def _run(chunk: np.ndarray) -> np.ndarray:
        with tc.precision(dtype), tc.no_grad():
            return model_forward(chunk, cfg, params).logits.data

    if not chunks:
        return np.zeros((0, cfg.num_classes), dtype=dtype)
    if threads <= 1 or len(chunks) == 1:
        outs = [_run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(_run, chunks))
    return np.concatenate(outs, axis=0)
