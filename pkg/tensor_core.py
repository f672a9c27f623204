"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the encoder needs are provided. Every differentiable
operation appends one node to the active `ComputationTape`; `backward`
replays the nodes in reverse order and leaves gradients on the
`requires_grad` leaves. Values are float32 unless a `precision` context
selects float64 (used by the tight gradient checks).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, expit

from shared import ContractError, DimensionError, NumericalError, ValidationError

__all__ = [
    "Tensor",
    "ComputationTape",
    "GradCheckEntry",
    "precision",
    "get_default_dtype",
    "no_grad",
    "is_grad_enabled",
    "parameter",
    "matmul",
    "softmax_lastdim",
    "layer_norm",
    "gelu",
    "sigmoid",
    "cross_entropy",
    "concat",
    "dropout",
    "backward",
    "gradient_check",
]

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()

LAYER_NORM_EPS = 1e-5


def get_default_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype: Any) -> Iterator[None]:
    """Switch the default real type for tensors created inside the block."""
    resolved = np.dtype(dtype).type
    if resolved not in (np.float32, np.float64):
        raise ValidationError(f"unsupported precision {dtype!r}; use float32 or float64")
    previous = get_default_dtype()
    _state.dtype = resolved
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@dataclass
class TapeNode:
    op: str
    out: "Tensor"
    inputs: Tuple["Tensor", ...]
    backward_fn: BackwardFn


class ComputationTape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations complete, so inputs always precede the
    operations that consume them. A tape is single-owner and is released
    after `backward`; the next recorded operation opens a fresh one.
    """

    def __init__(self) -> None:
        self.nodes: List[TapeNode] = []
        self.released = False
        self._previous: Optional[ComputationTape] = None

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "ComputationTape":
        self._previous = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc: Any) -> None:
        _state.tape = self._previous
        self._previous = None

    def record(self, node: TapeNode) -> None:
        if self.released:
            raise ContractError("cannot record on a released tape")
        self.nodes.append(node)

    def release(self) -> None:
        self.nodes.clear()
        self.released = True

    def backward(self, loss: "Tensor") -> None:
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.released:
            raise ContractError("tape already released; run the forward pass again")

        grads = {id(loss): np.ones_like(loss.data)}
        leaves: dict = {}
        if loss._tape is None and loss.requires_grad:
            leaves[id(loss)] = loss

        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for tensor, g_in in zip(node.inputs, node.backward_fn(g)):
                if g_in is None or not tensor.requires_grad:
                    continue
                g_in = _unbroadcast(g_in, tensor.shape)
                key = id(tensor)
                grads[key] = grads[key] + g_in if key in grads else g_in
                if tensor._tape is None:
                    leaves[key] = tensor

        for key, leaf in leaves.items():
            g = np.array(grads[key], dtype=leaf.data.dtype)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        self.release()


def _active_tape() -> ComputationTape:
    tape = getattr(_state, "tape", None)
    if tape is None or tape.released:
        tape = ComputationTape()
        _state.tape = tape
    return tape


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """Dense n-dimensional array with an optional gradient buffer."""

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None) -> None:
        arr = np.array(data, dtype=get_default_dtype())
        if not np.isfinite(arr).all():
            raise NumericalError(f"tensor {name or '<unnamed>'} holds non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[ComputationTape] = None

    @classmethod
    def _from_op(
        cls,
        op: str,
        data: np.ndarray,
        inputs: Tuple["Tensor", ...],
        backward_fn: BackwardFn,
    ) -> "Tensor":
        if not np.isfinite(data).all():
            raise NumericalError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._tape = None
        out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        if out.requires_grad:
            tape = _active_tape()
            tape.record(TapeNode(op, out, inputs, backward_fn))
            out._tape = tape
        return out

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype.__name__}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> type:
        return self.data.dtype.type

    def __len__(self) -> int:
        return self.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.name = self.name
        out.requires_grad = False
        out._tape = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # arithmetic

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return Tensor._from_op("neg", -self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: Scalar) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise ValidationError("only scalar exponents are supported")
        x = self.data
        return Tensor._from_op(
            "pow", x ** exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),)
        )

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        shape = self.shape
        dtype = self.data.dtype

        def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
            gx = np.zeros(shape, dtype=dtype)
            np.add.at(gx, index, g)
            return (gx,)

        return Tensor._from_op("getitem", np.array(self.data[index]), (self,), _backward)

    # shape ops

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {old} into {shape}") from exc
        return Tensor._from_op("reshape", data, (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(
            "transpose", self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def broadcast_to(self, shape: Tuple[int, ...]) -> "Tensor":
        try:
            data = np.broadcast_to(self.data, shape)
        except ValueError as exc:
            raise DimensionError(f"cannot broadcast {self.shape} to {tuple(shape)}") from exc
        return Tensor._from_op("broadcast_to", np.array(data), (self,), lambda g: (g,))

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._from_op("sum", np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), _backward)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        total = self.sum(axis=axis, keepdims=keepdims)
        count = self.size // max(total.size, 1)
        return total * (1.0 / count)


def _as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def parameter(data: Any, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def add(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor._from_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor._from_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    x, y = a.data, b.data
    return Tensor._from_op("mul", x * y, (a, b), lambda g: (g * y, g * x))


def div(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    x, y = a.data, b.data
    return Tensor._from_op("div", x / y, (a, b), lambda g: (g / y, -g * x / (y * y)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Batch extents broadcast; the backward rule is dA = dC·Bᵀ, dB = Aᵀ·dC.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from exc
    x, y = a.data, b.data
    return Tensor._from_op(
        "matmul",
        np.matmul(x, y),
        (a, b),
        lambda g: (np.matmul(g, np.swapaxes(y, -1, -2)), np.matmul(np.swapaxes(x, -1, -2), g)),
    )


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op("softmax", y, (x,), _backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must match last extent of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    w = gamma.data
    lead = tuple(range(x.ndim - 1))

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        dxhat = g * w
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op("layer_norm", xhat * w + beta.data, (x, gamma, beta), _backward)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU, x·Φ(x)."""
    v = x.data
    cdf = 0.5 * (1.0 + erf(v / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * v * v) / np.sqrt(2.0 * np.pi)
    y = (v * cdf).astype(v.dtype)
    return Tensor._from_op("gelu", y, (x,), lambda g: ((g * (cdf + v * pdf)).astype(v.dtype),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data).astype(x.data.dtype)
    return Tensor._from_op("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of `labels` under softmax(`logits`)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    batch, classes = logits.shape
    y = np.asarray(labels)
    if y.shape != (batch,):
        raise DimensionError(f"cross_entropy: {len(y)} labels for {batch} logit rows")
    if not np.issubdtype(y.dtype, np.integer) or (y < 0).any() or (y >= classes).any():
        raise ValidationError(f"labels must be integers in [0, {classes})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - log_norm
    rows = np.arange(batch)
    loss = np.asarray(-logp[rows, y].mean(), dtype=z.dtype)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.exp(logp)
        grad[rows, y] -= 1.0
        return (grad * (g / batch),)

    return Tensor._from_op("cross_entropy", loss, (logits,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(_as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in parts)
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in parts])[:-1]
    return Tensor._from_op("concat", data, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    if rate >= 1.0:
        raise ValidationError(f"dropout rate must be < 1, got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return Tensor._from_op("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every `requires_grad` leaf that `loss` depends on."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
            return
        raise ContractError("loss was not produced by recorded operations")
    loss._tape.backward(loss)


@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


def gradient_check(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    samples: Optional[Sequence[Tuple[int, int]]] = None,
    h: float = 1e-3,
    floor: float = 1e-3,
) -> List[GradCheckEntry]:
    """Compare analytic gradients against central finite differences.

    `samples` holds (tensor position, flat index) pairs; all entries are
    checked when omitted. The relative error is |a−n| / max(|a|, |n|, floor).
    """
    for t in tensors:
        t.zero_grad()
    backward(loss_fn())
    if samples is None:
        samples = [(k, i) for k, t in enumerate(tensors) for i in range(t.size)]

    entries: List[GradCheckEntry] = []
    for k, i in samples:
        t = tensors[k]
        flat = t.data.reshape(-1)
        original = flat[i].copy()
        with no_grad():
            flat[i] = original + h
            plus = loss_fn().item()
            flat[i] = original - h
            minus = loss_fn().item()
        flat[i] = original
        numeric = (plus - minus) / (2.0 * h)
        analytic = 0.0 if t.grad is None else float(t.grad.reshape(-1)[i])
        scale = max(abs(analytic), abs(numeric), floor)
        entries.append(GradCheckEntry(t.name or f"tensor{k}", i, analytic, numeric, abs(analytic - numeric) / scale))
    return entries
