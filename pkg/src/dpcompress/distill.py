"""Temperature softmax and the distillation objective.

    L = H(y, softmax(s)) + lambda * H(softmax(t / T), softmax(s / T))

The hard-label term uses temperature 1. There is no T^2 rescaling of the
soft term (Hinton et al. add one; this objective is used as written).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class KdConfig:
    lam: float = 1.0
    temperature: float = 2.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


def softmax_temperature(z, temperature: float) -> np.ndarray:
    """exp(z_i / T) / sum_j exp(z_j / T) along the last axis."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(z.data if isinstance(z, T.Tensor) else z, dtype=np.float64) / temperature
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def kd_loss(student_logits, teacher_logits, labels, cfg: KdConfig, reduction: str = "mean") -> T.Tensor:
    """Distillation loss; the teacher side is detached, so no gradient reaches it."""
    student_logits = T.as_tensor(student_logits)
    t = teacher_logits.data if isinstance(teacher_logits, T.Tensor) else np.asarray(teacher_logits, np.float64)
    if t.shape != student_logits.shape:
        raise ValueError(f"teacher logits {t.shape} do not match student logits {student_logits.shape}")
    if len(labels) != student_logits.shape[0]:
        raise ValueError("labels and logits disagree on batch size")
    hard = T.cross_entropy(student_logits, labels, reduction)
    if cfg.lam == 0:
        return hard
    soft_targets = softmax_temperature(t, cfg.temperature)
    soft = T.soft_cross_entropy(soft_targets, T.scale(student_logits, 1.0 / cfg.temperature), reduction)
    return T.add(hard, T.scale(soft, cfg.lam))
