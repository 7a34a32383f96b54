"""Backend selection for the per-example gradient kernels.

The compiled extension is used when it imports; otherwise (or with
``DPCOMPRESS_PURE=1`` in the environment) the numpy fallback is used. The two
agree to rounding; only the per-example norm reductions differ in summation
order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from types import ModuleType
from typing import Sequence

import numpy as np

from . import _kernels_py


def _load() -> tuple[ModuleType, str]:
    if os.environ.get("DPCOMPRESS_PURE", "") not in ("", "0"):
        return _kernels_py, "python"
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        return _kernels_py, "python"
    return _kernels, "cython"


backend, BACKEND_NAME = _load()
_DUMMY_MASK = np.ones((1, 1))


@dataclass
class Factor:
    """Per-example gradient of one parameter in factored form.

    ``kind == "outer"``: example s contributes ``outer(A[s], D[s]) * mask``.
    ``kind == "rows"``: example s contributes ``D[s]`` (biases).
    """

    kind: str
    D: np.ndarray
    A: np.ndarray | None = None
    mask: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        if self.kind == "outer":
            return (self.A.shape[1], self.D.shape[1])
        return (self.D.shape[1],)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _c(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def per_example_sqnorms(factors: Sequence[Factor], batch: int, impl: ModuleType | None = None) -> np.ndarray:
    impl = impl or backend
    out = np.zeros(batch)
    for f in factors:
        if f.kind == "outer":
            masked = f.mask is not None
            impl.sqnorm_outer(_c(f.A), _c(f.D), _c(f.mask) if masked else _DUMMY_MASK, masked, out)
        else:
            impl.sqnorm_rows(_c(f.D), out)
    return out


def weighted_sum(factors: Sequence[Factor], weights: np.ndarray, impl: ModuleType | None = None) -> list[np.ndarray]:
    """Per-parameter sum over examples of weights[s] * (per-example gradient)."""
    impl = impl or backend
    weights = _c(weights)
    sums = []
    for f in factors:
        out = np.zeros(f.shape)
        if f.kind == "outer":
            masked = f.mask is not None
            impl.accum_outer(_c(f.A), _c(f.D), _c(f.mask) if masked else _DUMMY_MASK, masked, weights, out)
        else:
            impl.accum_rows(_c(f.D), weights, out)
        sums.append(out)
    return sums


def clip_factors(norms: np.ndarray, clip_norm: float) -> np.ndarray:
    """min(1, C / norm) per example, exactly 1.0 where no clipping happens."""
    factors = np.ones_like(norms)
    over = norms > clip_norm
    factors[over] = clip_norm / norms[over]
    return factors


def clipped_sum(factors: Sequence[Factor], batch: int, clip_norm: float,
                impl: ModuleType | None = None) -> tuple[list[np.ndarray], np.ndarray]:
    """Sum of per-example gradients, each clipped to ``clip_norm``.

    Returns the per-parameter sums and the pre-clip per-example norms.
    """
    norms = np.sqrt(per_example_sqnorms(factors, batch, impl))
    return weighted_sum(factors, clip_factors(norms, clip_norm), impl), norms


def materialize(factors: Sequence[Factor], batch: int) -> np.ndarray:
    """Explicit (batch, P) matrix of flattened per-example gradients."""
    cols = []
    for f in factors:
        if f.kind == "outer":
            G = f.A[:, :, None] * f.D[:, None, :]
            if f.mask is not None:
                G = G * f.mask
            cols.append(G.reshape(batch, -1))
        else:
            cols.append(f.D.reshape(batch, -1))
    return np.ascontiguousarray(np.concatenate(cols, axis=1)) if cols else np.zeros((batch, 0))


def clip_rows(G: np.ndarray, clip_norm: float, impl: ModuleType | None = None) -> np.ndarray:
    """Clip rows of ``G`` in place; returns pre-clip norms."""
    impl = impl or backend
    norms = np.zeros(G.shape[0])
    impl.clip_rows(G, float(clip_norm), norms)
    return norms
