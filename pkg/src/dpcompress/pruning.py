"""Magnitude pruning: masks, cumulative unstructured schedules, block ranking.

Every selection sorts by (|w|, position in the flattened prunable vector), so
ties always resolve toward the earlier weight and reruns pick the same set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import LayeredClassifier


@dataclass(frozen=True)
class ImpConfig:
    """alpha: percent pruned per round. iters_per_round / final_iters: the
    DPSGD steps run before each prune and after the last one. Exactly one of
    ``sparsity`` (percent, unstructured) or ``layers_to_drop`` is set."""

    alpha: float = 10.0
    iters_per_round: int = 0
    final_iters: int = 0
    sparsity: float | None = None
    layers_to_drop: int | None = None

    def __post_init__(self):
        if not 0 < self.alpha <= 100:
            raise ValueError(f"alpha must be in (0, 100], got {self.alpha}")
        if self.iters_per_round < 0 or self.final_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if (self.sparsity is None) == (self.layers_to_drop is None):
            raise ValueError("set exactly one of sparsity or layers_to_drop")
        if self.sparsity is not None and not 0 < self.sparsity < 100:
            raise ValueError(f"sparsity must be in (0, 100), got {self.sparsity}")
        if self.layers_to_drop is not None and self.layers_to_drop < 0:
            raise ValueError("layers_to_drop must be >= 0")

    @property
    def rounds(self) -> int:
        """ceil(S / alpha) prune rounds (unstructured) or L drops (structured)."""
        if self.layers_to_drop is not None:
            return self.layers_to_drop
        # round first so 50/10 is not pushed to 6 by float error
        return math.ceil(round(self.sparsity / self.alpha, 9))


@dataclass
class PruneMask:
    """Keep-masks for every prunable weight (True = kept)."""

    masks: dict[str, np.ndarray]
    target_sparsity: float
    iteration: int

    @property
    def total(self) -> int:
        return sum(m.size for m in self.masks.values())

    @property
    def pruned(self) -> int:
        return sum(int(np.count_nonzero(~m)) for m in self.masks.values())

    @property
    def sparsity(self) -> float:
        return self.pruned / self.total if self.total else 0.0

    def flat(self) -> np.ndarray:
        return np.concatenate([m.reshape(-1) for m in self.masks.values()])

    def contains_pruned_of(self, earlier: "PruneMask") -> bool:
        """True when every coordinate pruned in ``earlier`` is pruned here too."""
        return bool(np.all(self.flat() <= earlier.flat()))


def prunable_vector(model: LayeredClassifier) -> np.ndarray:
    """Prunable weights flattened in registry order."""
    return np.concatenate([model.params[n].reshape(-1) for n in model.prunable_names()])


def _split(model: LayeredClassifier, flat: np.ndarray) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for n in model.prunable_names():
        size = model.params[n].size
        out[n] = flat[pos:pos + size].reshape(model.params[n].shape).copy()
        pos += size
    return out


def smallest_k(values: np.ndarray, k: int, candidates: np.ndarray | None = None) -> np.ndarray:
    """Indices of the k smallest |values| among ``candidates`` (ties: lower index)."""
    idx = np.arange(values.size) if candidates is None else np.flatnonzero(candidates)
    if not 0 <= k <= idx.size:
        raise ValueError(f"cannot select {k} of {idx.size} weights")
    order = np.argsort(np.abs(values[idx]), kind="stable")
    return idx[order[:k]]


def percent_count(percent: float, total: int) -> int:
    """round(percent/100 * total), halves rounded up."""
    return int(math.floor(percent * total / 100.0 + 0.5))


def cumulative_mask(model: LayeredClassifier, percent: float, iteration: int = 0) -> PruneMask:
    """Prune until ``percent`` of all prunable weights are gone.

    Already-pruned weights stay pruned; the extra ones are the smallest by
    current magnitude among the survivors.
    """
    w = prunable_vector(model)
    keep = np.concatenate([model.masks[n].reshape(-1) for n in model.prunable_names()])
    target = percent_count(percent, w.size)
    extra = target - int(np.count_nonzero(~keep))
    if extra > 0:
        keep = keep.copy()
        keep[smallest_k(w, extra, keep)] = False
    return PruneMask(_split(model, keep), percent, iteration)


def magnitude_mask(values: np.ndarray, percent: float) -> np.ndarray:
    """Keep-mask over a flat vector removing the smallest ``percent``."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    keep = np.ones(values.size, dtype=bool)
    keep[smallest_k(values, percent_count(percent, values.size))] = False
    return keep


@dataclass
class DropDecision:
    block: int
    origin: int
    counts: list[int]
    w_min_size: int


def w_min(model: LayeredClassifier, alpha: float) -> np.ndarray:
    """Flat indices of the alpha% smallest-magnitude surviving prunable weights."""
    w = prunable_vector(model)
    keep = np.concatenate([model.masks[n].reshape(-1) for n in model.prunable_names()])
    return smallest_k(w, percent_count(alpha, int(keep.sum())), keep)


def block_of_prunable(model: LayeredClassifier) -> np.ndarray:
    """Block index of each entry of ``prunable_vector(model)``."""
    info = {i.name: i.block for i in model.registry}
    return np.concatenate([np.full(model.params[n].size, info[n]) for n in model.prunable_names()])


def choose_block_to_drop(model: LayeredClassifier, alpha: float) -> DropDecision:
    """Block holding the most W_min weights; ties go to the lowest index."""
    if model.n_blocks == 0:
        raise ValueError("no blocks left to drop")
    hits = block_of_prunable(model)[w_min(model, alpha)]
    counts = np.bincount(hits, minlength=model.n_blocks)
    i = int(np.argmax(counts))
    return DropDecision(i, model.block_origin[i], [int(c) for c in counts], int(hits.size))
