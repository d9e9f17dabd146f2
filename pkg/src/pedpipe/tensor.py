"""Reverse-mode automatic differentiation over dense numpy arrays.

Every operation builds a node in an implicit tape (parent links plus a
backward closure); ``backward`` walks the tape once in reverse topological
order and accumulates gradients into leaf tensors. Arithmetic is float64 by
default so analytic gradients can be checked against central finite
differences at tight tolerances; float32 weights are possible by constructing
tensors from float32 arrays (numpy keeps the dtype through every op here).

Broadcasting is deliberately restricted to the trailing-dimension bias add;
all other elementwise ops require exactly matching shapes, which keeps every
backward rule a direct transpose of its forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteGradientError",
    "AdamWState",
    "tensor",
    "zeros",
    "randn",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "sum_all",
    "mean_all",
    "softmax",
    "log_sigmoid",
    "softplus",
    "gelu",
    "layer_norm",
    "embedding_lookup",
    "transpose",
    "reshape",
    "narrow",
    "concat",
    "take_rows",
    "row_scale",
    "masked_fill",
    "picked_log_softmax",
    "cross_entropy_logits",
    "sample_standard_normal",
    "backward",
    "adamw_step",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)
# Large finite constant for causal masking: exp(x - _MASK_VALUE) underflows to
# exactly 0.0 for any realistic score x, so masked positions contribute
# nothing, bit for bit, while every intermediate stays finite.
_MASK_VALUE = -1e9


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class NonFiniteGradientError(RuntimeError):
    """Raised by the optimizer when a parameter gradient is NaN or infinite."""


class Tensor:
    """A dense array plus an optional gradient slot and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn = None
        self._op = ""

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # Small set of operator conveniences; the module functions are the API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def randn(rng, shape, std: float = 1.0, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    data = (rng.standard_normal(shape) * std).astype(dtype, copy=False)
    return Tensor(data, requires_grad=requires_grad)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data, dtype=np.float64)
    t.grad += g


# ---------------------------------------------------------------------------
# Elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a trailing-dimension bias vector."""
    if a.shape == b.shape:
        bias_mode = False
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1:] == b.shape:
        bias_mode = True
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data + b.data

    def backward_fn(g):
        _accumulate(a, g)
        if bias_mode:
            _accumulate(b, g.reshape(-1, b.shape[0]).sum(axis=0))
        else:
            _accumulate(b, g)

    return _node(out_data, (a, b), "add", backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(a.data - b.data, (a, b), "sub", backward_fn)


def neg(a: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), "neg", backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def backward_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), "mul", backward_fn)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward_fn(g):
        _accumulate(a, g * s)

    return _node(a.data * s, (a,), "scale", backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; also batched when both operands carry identical leading dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _node(out_data, (a, b), "matmul", backward_fn)


def sum_all(a: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(a, np.full_like(a.data, float(g), dtype=np.float64))

    return _node(np.asarray(a.data.sum()), (a,), "sum", backward_fn)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward_fn(g):
        _accumulate(a, np.full_like(a.data, float(g) / n, dtype=np.float64))

    return _node(np.asarray(a.data.mean()), (a,), "mean", backward_fn)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes_t = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes_t)

    def backward_fn(g):
        _accumulate(a, g.transpose(inverse))

    return _node(a.data.transpose(axes_t), (a,), "transpose", backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    old_shape = a.shape

    def backward_fn(g):
        _accumulate(a, g.reshape(old_shape))

    return _node(a.data.reshape(shape), (a,), "reshape", backward_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {a.shape}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data, dtype=np.float64)
            full[index] = g
            _accumulate(a, full)

    return _node(a.data[index], (a,), "narrow", backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(index)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", backward_fn)


def take_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows along axis 0 (duplicate indices accumulate in backward)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for {a.shape[0]} rows")

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data, dtype=np.float64)
            np.add.at(full, idx, g)
            _accumulate(a, full)

    return _node(a.data[idx], (a,), "take_rows", backward_fn)


def row_scale(a: Tensor, w: Tensor) -> Tensor:
    """Multiply each row of a 2-D tensor by a per-row scalar weight."""
    if a.data.ndim != 2 or w.data.ndim != 1 or a.shape[0] != w.shape[0]:
        raise ShapeError(f"row_scale: need (n, d) and (n,), got {a.shape} and {w.shape}")

    def backward_fn(g):
        _accumulate(a, g * w.data[:, None])
        _accumulate(w, (g * a.data).sum(axis=1))

    return _node(a.data * w.data[:, None], (a, w), "row_scale", backward_fn)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True with ``value``; gradient flows only elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} != tensor shape {a.shape}")

    def backward_fn(g):
        _accumulate(a, np.where(mask, 0.0, g))

    return _node(np.where(mask, value, a.data), (a,), "masked_fill", backward_fn)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row gather from an embedding table with scatter-add backward."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("embedding_lookup: ids must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: token id out of range for vocab {table.shape[0]}")

    def backward_fn(g):
        if table.requires_grad:
            full = np.zeros_like(table.data, dtype=np.float64)
            np.add.at(full, idx, g)
            _accumulate(table, full)

    return _node(table.data[idx], (table,), "embedding", backward_fn)


# ---------------------------------------------------------------------------
# Nonlinearities


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax (max-subtraction); rows sum to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - inner))

    return _node(y, (a,), "softmax", backward_fn)


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x) with the overflow-safe max(x,0) + log1p(exp(-|x|)) form."""
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward_fn(g):
        _accumulate(a, g / (1.0 + np.exp(-x)))

    return _node(y, (a,), "softplus", backward_fn)


def log_sigmoid(a: Tensor) -> Tensor:
    """log sigma(x) = -softplus(-x); finite for all finite x."""
    x = a.data
    y = -(np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x))))

    def backward_fn(g):
        _accumulate(a, g / (1.0 + np.exp(x)))

    return _node(y, (a,), "log_sigmoid", backward_fn)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = x * cdf

    def backward_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        _accumulate(a, g * (cdf + x * pdf))

    return _node(y, (a,), "gelu", backward_fn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat * gain.data + bias.data

    def backward_fn(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            mean_gx = gx.mean(axis=-1, keepdims=True)
            mean_gx_xhat = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(a, inv_std * (gx - mean_gx - xhat * mean_gx_xhat))

    return _node(y, (a, gain, bias), "layer_norm", backward_fn)


# ---------------------------------------------------------------------------
# Loss primitives


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def picked_log_softmax(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Per-row log softmax(logits)[target]; the building block of every NLL here."""
    if logits.data.ndim != 2:
        raise ShapeError(f"picked_log_softmax: logits must be 2-D, got {logits.shape}")
    n, v = logits.shape
    idx = np.asarray(targets, dtype=np.int64)
    if idx.shape != (n,):
        raise ShapeError(f"picked_log_softmax: {n} rows but {idx.size} targets")
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"picked_log_softmax: target id out of range for vocab {v}")
    ls = _log_softmax_rows(logits.data)
    picked = ls[np.arange(n), idx]
    probs = np.exp(ls)

    def backward_fn(g):
        if logits.requires_grad:
            grad = -probs * g[:, None]
            grad[np.arange(n), idx] += g
            _accumulate(logits, grad)

    return _node(picked, (logits,), "picked_log_softmax", backward_fn)


def cross_entropy_logits(logits: Tensor, targets: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Mean masked-position NLL; an all-False mask yields 0 with zero gradient."""
    n = logits.shape[0]
    mask_arr = np.asarray(mask, dtype=bool)
    if mask_arr.shape != (n,):
        raise ShapeError(f"cross_entropy_logits: mask length {mask_arr.size} != {n} rows")
    keep = np.flatnonzero(mask_arr)
    if keep.size == 0:
        return Tensor(np.asarray(0.0))
    picked = picked_log_softmax(logits, targets)
    return neg(mean_all(take_rows(picked, keep)))


def sample_standard_normal(rng, shape) -> Tensor:
    """Seeded standard-normal draw; a constant leaf on the tape."""
    return Tensor(rng.standard_normal(shape))


# ---------------------------------------------------------------------------
# Backward pass


def backward(root: Tensor) -> None:
    """Reverse-topological sweep from a scalar root, accumulating leaf gradients."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    root.grad = np.ones_like(root.data, dtype=np.float64)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamWState:
    """First/second moment estimates plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict,
    state: AdamWState,
    lr: float,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update (decoupled weight decay, bias-corrected moments) in place.

    The whole step is rejected, with no parameter touched, if any gradient is
    non-finite; missing gradients count as zero.
    """
    beta1, beta2 = betas
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data, dtype=np.float64)
            state.v[name] = np.zeros_like(p.data, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        update = m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)
