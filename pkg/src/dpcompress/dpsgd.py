"""DPSGD: per-example gradients, clipping, Gaussian noise, update.

One step with clip norm C, noise multiplier sigma and expected batch b:

    g = (sum_s clip_C(g_s) + N(0, sigma^2 C^2 I)) / b
    params <- params - lr * g            (pruned coordinates stay at 0)

Batches are Poisson-sampled with rate q = b / N by default, which is what the
RDP accountant assumes. Randomness comes from two numpy PCG64 streams per
(seed, phase): one draws batches, the other the Gaussian noise (numpy's
ziggurat sampler), always for the full parameter vector in registry order.
"""

from __future__ import annotations

import logging
import math
import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .accountant import AccountantState
from .distill import KdConfig, kd_loss
from .model import LayeredClassifier, factors_from_trace

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DpSgdConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    learning_rate: float = 0.1
    expected_batch_size: int = 128
    seed: int = 0
    sampling: str = "poisson"

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if not self.noise_multiplier >= 0:
            raise ValueError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if self.noise_multiplier > 0 and math.isinf(self.clip_norm):
            raise ValueError("noise with an infinite clip norm has infinite scale")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.expected_batch_size < 1:
            raise ValueError("expected_batch_size must be >= 1")
        if self.sampling not in ("poisson", "shuffle"):
            raise ValueError(f"sampling must be 'poisson' or 'shuffle', got {self.sampling!r}")


@dataclass
class GradientBatch:
    """Flattened per-example gradients, one row per example, registry order."""

    vectors: np.ndarray

    @property
    def count(self) -> int:
        return self.vectors.shape[0]


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    teacher_logits: np.ndarray | None = None

    def __len__(self):
        return len(self.y)


def make_streams(seed: int, phase: str) -> tuple[np.random.Generator, np.random.Generator]:
    """(batch-sampling, noise) generators for one training phase."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(phase.encode())])
    sample, noise = ss.spawn(2)
    return np.random.default_rng(sample), np.random.default_rng(noise)


# --- gradients --------------------------------------------------------------

def _summed_loss(model, batch: Batch, kd: KdConfig | None, leaves=None, trace=None):
    logits = model.forward(batch.x, leaves, trace)
    if kd is None:
        return T.cross_entropy(logits, batch.y, "sum")
    if batch.teacher_logits is None:
        raise ValueError("distillation needs teacher logits in the batch")
    return kd_loss(logits, batch.teacher_logits, batch.y, kd, "sum")


def per_example_factors(model: LayeredClassifier, batch: Batch, kd: KdConfig | None = None) -> list[kernels.Factor]:
    """Per-example gradients in factored form from one batched backward pass.

    Rows of the batch do not interact (normalisation is per row), so backprop
    of the summed loss gives each example's own gradient row by row.
    """
    trace: list = []
    loss = _summed_loss(model, batch, kd, model.leaves(True), trace)
    loss.backward()
    return factors_from_trace(trace, len(batch))


def per_example_gradients(model: LayeredClassifier, batch: Batch, kd: KdConfig | None = None) -> GradientBatch:
    return GradientBatch(kernels.materialize(per_example_factors(model, batch, kd), len(batch)))


def per_example_gradients_loop(model: LayeredClassifier, batch: Batch, kd: KdConfig | None = None) -> GradientBatch:
    """Reference path: a separate forward/backward per example."""
    rows = []
    for s in range(len(batch)):
        one = Batch(batch.x[s:s + 1], batch.y[s:s + 1],
                    None if batch.teacher_logits is None else batch.teacher_logits[s:s + 1])
        leaves = model.leaves(True)
        _summed_loss(model, one, kd, leaves).backward()
        rows.append(np.concatenate([leaves[i.name].grad.reshape(-1) for i in model.registry]))
    P = model.num_params()
    return GradientBatch(np.array(rows).reshape(len(batch), P))


def batch_gradient(model: LayeredClassifier, batch: Batch, kd: KdConfig | None = None) -> np.ndarray:
    """Gradient of the summed loss, flattened in registry order."""
    leaves = model.leaves(True)
    _summed_loss(model, batch, kd, leaves).backward()
    return np.concatenate([(leaves[i.name].grad if leaves[i.name].grad is not None
                            else np.zeros(i.shape)).reshape(-1) for i in model.registry])


# --- clipping and noise -----------------------------------------------------

def clip_per_example(grads: GradientBatch, clip_norm: float) -> GradientBatch:
    """Scale each row to norm <= C; rows already within C are returned unchanged."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be > 0")
    G = np.array(grads.vectors, dtype=np.float64, order="C")
    kernels.clip_rows(G, clip_norm)
    return GradientBatch(G)


def _noise(rng: np.random.Generator, size: int, sigma: float, clip_norm: float) -> np.ndarray | None:
    if sigma == 0:
        return None
    return rng.standard_normal(size) * (sigma * clip_norm)


def noisy_aggregate(clipped: GradientBatch, sigma: float, clip_norm: float, expected_batch_size: float,
                    rng: np.random.Generator) -> np.ndarray:
    """(sum of clipped rows + N(0, sigma^2 C^2 I)) / expected batch size."""
    total = clipped.vectors.sum(axis=0)
    noise = _noise(rng, clipped.vectors.shape[1], sigma, clip_norm)
    if noise is not None:
        total = total + noise
    return total / expected_batch_size


# --- steps ------------------------------------------------------------------

def apply_update(model: LayeredClassifier, flat_grad: np.ndarray, learning_rate: float):
    """params -= lr * grad, with pruned coordinates held at exactly zero."""
    grads = model.unflatten(flat_grad)
    for info in model.registry:
        g = grads[info.name]
        mask = model.masks.get(info.name)
        if mask is not None:
            g = np.where(mask, g, 0.0)
        model.params[info.name] = model.params[info.name] - learning_rate * g


def private_gradient(model: LayeredClassifier, batch: Batch, config: DpSgdConfig,
                     noise_rng: np.random.Generator, kd: KdConfig | None = None) -> np.ndarray:
    """Noisy clipped mean gradient for one batch (the quantity DPSGD descends)."""
    P = model.num_params()
    if len(batch) == 0:
        total = np.zeros(P)
    elif math.isinf(config.clip_norm):
        # clipping disabled: the per-example sum is the batch gradient
        total = batch_gradient(model, batch, kd)
    else:
        factors = per_example_factors(model, batch, kd)
        sums, _ = kernels.clipped_sum(factors, len(batch), config.clip_norm)
        total = np.concatenate([s.reshape(-1) for s in sums])
    noise = _noise(noise_rng, P, config.noise_multiplier, config.clip_norm)
    if noise is not None:
        total = total + noise
    return total / config.expected_batch_size


def dpsgd_step(model: LayeredClassifier, batch: Batch, config: DpSgdConfig,
               accountant: AccountantState | None, noise_rng: np.random.Generator,
               sampling_rate: float, kd: KdConfig | None = None, phase: str = "train"):
    """One private update in place; the accountant is charged before the update."""
    if accountant is not None:
        accountant.charge(sampling_rate, config.noise_multiplier, 1, phase)
    apply_update(model, private_gradient(model, batch, config, noise_rng, kd), config.learning_rate)


def sgd_step(model: LayeredClassifier, batch: Batch, learning_rate: float, expected_batch_size: float,
             kd: KdConfig | None = None):
    """Non-private minibatch step on the summed loss divided by the expected batch size."""
    g = batch_gradient(model, batch, kd) if len(batch) else np.zeros(model.num_params())
    apply_update(model, g / expected_batch_size, learning_rate)


class DPSGD:
    """Batch sampler plus noise stream for one training phase."""

    def __init__(self, config: DpSgdConfig, n_examples: int, accountant: AccountantState | None = None,
                 phase: str = "train", private: bool = True, stream: str | None = None):
        if n_examples < 1:
            raise ValueError("empty dataset")
        self.config = config
        self.n = n_examples
        self.q = min(1.0, config.expected_batch_size / n_examples)
        self.accountant = accountant
        self.phase = phase
        self.private = private
        # the stream name keys the RNGs; the phase name labels accountant charges
        self.sample_rng, self.noise_rng = make_streams(config.seed, stream or phase)
        self.steps_taken = 0
        self._perm: np.ndarray | None = None
        self._pos = 0
        if config.sampling == "shuffle" and private:
            warnings.warn("fixed-size shuffled batches: the Poisson-subsampling RDP bound is only an "
                          "approximation for this sampler", stacklevel=2)

    def next_indices(self) -> np.ndarray:
        if self.config.sampling == "poisson":
            return np.flatnonzero(self.sample_rng.random(self.n) < self.q)
        b = min(self.config.expected_batch_size, self.n)
        if self._perm is None or self._pos + b > self.n:
            self._perm = self.sample_rng.permutation(self.n)
            self._pos = 0
        idx = np.sort(self._perm[self._pos:self._pos + b])
        self._pos += b
        return idx

    def step(self, model: LayeredClassifier, x: np.ndarray, y: np.ndarray,
             teacher_logits: np.ndarray | None = None, kd: KdConfig | None = None):
        idx = self.next_indices()
        batch = Batch(x[idx], y[idx], None if teacher_logits is None else teacher_logits[idx])
        if self.private:
            dpsgd_step(model, batch, self.config, self.accountant, self.noise_rng, self.q, kd, self.phase)
        else:
            sgd_step(model, batch, self.config.learning_rate, self.config.expected_batch_size, kd)
        self.steps_taken += 1

    def run(self, model: LayeredClassifier, x, y, steps: int, teacher_logits=None, kd=None):
        for _ in range(steps):
            self.step(model, x, y, teacher_logits, kd)
        return model
