"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of ops the layered classifier and its losses need are
provided. Every op result records its parents and a closure that maps the
output gradient to parent gradients; :meth:`Tensor.backward` walks the graph
once in reverse topological order. Intermediate gradients are kept on the
nodes so callers can read activations' backprops (used for per-example
gradients).
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715
LAYERNORM_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: Sequence["Tensor"] = (), backward: Callable | None = None,
                 copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(node) into ``node.grad`` for every upstream node."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)

    def _accumulate(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        self.grad = g.copy() if self.grad is None else self.grad + g


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    return out


def _make(out, op, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(_finite(np.asarray(out, dtype=np.float64), op), needs, op=op,
                  parents=parents if needs else (), backward=backward if needs else None, copy=False)


# --- ops --------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _make(A @ B, "matmul", (a, b), backward)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector broadcast over ``a``'s rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def backward(g):
            return g, g
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def backward(g):
            return g, g.sum(axis=0)
    else:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _make(a.data + b.data, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shape tensors (used for weight masks)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g * B, g * A

    return _make(A * B, "mul", (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), "relu", (a,), lambda g: (g * on,))


def gelu(a) -> Tensor:
    """tanh approximation of GELU (smooth, so finite differences are clean)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_K * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * d,)

    return _make(out, "gelu", (a,), backward)


def layernorm(a, eps: float = LAYERNORM_EPS) -> Tensor:
    """Row-wise normalisation to zero mean, unit variance (no affine part)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, "layernorm", (a,), backward)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(a) -> Tensor:
    a = as_tensor(a)
    p = np.exp(_log_softmax(a.data))

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, "softmax", (a,), backward)


def _reduce(per_row: np.ndarray, reduction: str) -> tuple[float, float]:
    if reduction == "mean":
        return per_row.mean(), 1.0 / per_row.shape[0]
    if reduction == "sum":
        return per_row.sum(), 1.0
    raise ValueError(f"unknown reduction {reduction!r}")


def cross_entropy(logits, targets, reduction: str = "mean") -> Tensor:
    """Mean (or sum) over rows of -log softmax(logits)[target]."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy expects [batch, classes] logits")
    n, c = logits.shape
    t = np.asarray(targets)
    if t.shape != (n,):
        raise ValueError(f"targets must have shape ({n},), got {t.shape}")
    if n and (t.min() < 0 or t.max() >= c or not np.issubdtype(t.dtype, np.integer)):
        raise IndexError(f"class index out of range [0, {c})")
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    loss, w = _reduce(-logp[rows, t], reduction)

    def backward(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        return (d * (g * w),)

    return _make(np.asarray(loss), "cross_entropy", (logits,), backward)


def soft_cross_entropy(target_probs, logits, reduction: str = "mean") -> Tensor:
    """Mean (or sum) over rows of -sum_i t_i log softmax(logits)_i.

    ``target_probs`` is treated as a constant: no gradient reaches it.
    """
    logits = as_tensor(logits)
    t = np.asarray(target_probs.data if isinstance(target_probs, Tensor) else target_probs,
                   dtype=np.float64)
    if t.shape != logits.shape or t.ndim != 2:
        raise ValueError(f"target shape {t.shape} does not match logits {logits.shape}")
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("target rows must be probability vectors")
    logp = _log_softmax(logits.data)
    loss, w = _reduce(-(t * logp).sum(axis=1), reduction)

    def backward(g):
        return ((np.exp(logp) * t.sum(axis=1, keepdims=True) - t) * (g * w),)

    return _make(np.asarray(loss), "soft_cross_entropy", (logits,), backward)
