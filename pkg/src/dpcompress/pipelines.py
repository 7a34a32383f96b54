"""Private compression pipelines: fine-tuning, distillation, iterative pruning.

All student-side training draws batches and noise from the ``student``
stream of the configured seed, and teacher fine-tuning from the ``teacher``
stream. So a distillation run with lambda = 0, a structured run dropping no
blocks and a plain fine-tune of the same model follow the same trajectory.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .accountant import (AccountantState, BudgetAllocation, InfeasibleBudgetError, PhaseSpend, PrivacyBudget,
                         calibrate_shared_sigma, calibrate_sigma, privacy_report)
from .data import Dataset
from .distill import KdConfig
from .dpsgd import DPSGD, DpSgdConfig
from .model import LayeredClassifier, Random, ZeroShotFT, ZeroShotPT, init_student, random_model
from .pruning import DropDecision, ImpConfig, PruneMask, choose_block_to_drop, cumulative_mask

log = logging.getLogger(__name__)

STUDENT_STREAM = "student"
TEACHER_STREAM = "teacher"


@dataclass
class RoundRecord:
    index: int
    percent: float
    mask: PruneMask


@dataclass
class PipelineResult:
    model: LayeredClassifier
    accountant: AccountantState
    delta: float
    pipeline: str
    init_strategy: str | None = None
    noise_multiplier: dict[str, float] = field(default_factory=dict)
    rounds: list[RoundRecord] = field(default_factory=list)
    drops: list[DropDecision] = field(default_factory=list)
    teacher: LayeredClassifier | None = None
    label: str | None = None

    @property
    def steps(self) -> int:
        return self.accountant.steps

    def privacy(self) -> dict:
        rep = privacy_report(self.accountant, self.delta)
        rep["noise_multiplier"] = dict(self.noise_multiplier)
        return rep


def steps_for_epochs(epochs: float, n: int, expected_batch_size: int) -> int:
    """Number of steps that visit ``epochs`` passes in expectation."""
    return int(round(epochs * n / expected_batch_size))


def sampling_rate(dp: DpSgdConfig, n: int) -> float:
    return min(1.0, dp.expected_batch_size / n)


def calibrated(dp: DpSgdConfig, budget: PrivacyBudget, n: int, steps: int) -> DpSgdConfig:
    """``dp`` with the smallest noise multiplier that keeps ``steps`` steps within ``budget``."""
    sigma = calibrate_sigma(budget, sampling_rate(dp, n), steps)
    return dataclasses.replace(dp, noise_multiplier=sigma)


def _check_steps(*counts: int):
    if any(c < 0 for c in counts):
        raise ValueError("step counts must be >= 0")


def finetune(model: LayeredClassifier, data: Dataset, dp: DpSgdConfig, steps: int,
             accountant: AccountantState | None = None, phase: str = "finetune",
             stream: str = STUDENT_STREAM, private: bool = True) -> PipelineResult:
    """DPSGD (or plain SGD with ``private=False``) for ``steps`` steps on a copy of ``model``."""
    _check_steps(steps)
    acct = accountant if accountant is not None else AccountantState()
    work = model.copy()
    trainer = DPSGD(dp, data.n, acct if private else None, phase, private, stream)
    trainer.run(work, data.features, data.labels, steps)
    return PipelineResult(work, acct, data.default_delta(), "finetune",
                          noise_multiplier={phase: dp.noise_multiplier if private else 0.0})


def dpkd_sigmas(budget: BudgetAllocation, q: float, teacher_steps: int, student_steps: int,
                 sigma_mode: str) -> tuple[float, float, PrivacyBudget]:
    total = budget.total or PrivacyBudget(sum(p.budget.epsilon for p in budget.phases()),
                                          min(sum(p.budget.delta for p in budget.phases()), 0.999))
    spent = sum(p.budget.epsilon for p in budget.phases())
    if sigma_mode == "per-phase" and spent > total.epsilon * (1 + 1e-12):
        raise InfeasibleBudgetError(f"phase budgets sum to eps={spent:g}, above the total {total.epsilon:g}")
    if sigma_mode == "shared":
        s = calibrate_shared_sigma(total, [(q, teacher_steps), (q, student_steps)])
        return s, s, total
    if sigma_mode == "per-phase":
        st = calibrate_sigma(budget.teacher.budget, q, teacher_steps) if teacher_steps else 0.0
        ss = calibrate_sigma(budget.distill.budget, q, student_steps) if student_steps else 0.0
        return st, ss, total
    raise ValueError(f"unknown sigma mode {sigma_mode!r}")


def dpkd(teacher: LayeredClassifier, init, data: Dataset, kd: KdConfig, dp: DpSgdConfig,
         teacher_steps: int, student_steps: int, n_student_blocks: int,
         budget: BudgetAllocation | None = None, layer_rule: str = "even",
         sigma_mode: str = "shared") -> PipelineResult:
    """Private distillation.

    1. Fine-tune ``teacher`` (the public pre-trained model) with DPSGD.
    2. Build the student from ``init``. Random, ZeroShotPT and ZeroShotFT
       read no private data beyond the already-private teacher, so they cost
       nothing.
    3. Train the student on the distillation loss with DPSGD.

    With ``budget`` set, noise multipliers are calibrated before any training
    (``sigma_mode`` "shared": one sigma for both phases composed under RDP;
    "per-phase": each phase calibrated to its own slice). Without it the
    noise multiplier in ``dp`` is used as given.
    """
    _check_steps(teacher_steps, student_steps)
    q = sampling_rate(dp, data.n)
    delta = data.default_delta()
    if budget is not None:
        s_t, s_s, total = dpkd_sigmas(budget, q, teacher_steps, student_steps, sigma_mode)
        delta = total.delta
        dp_t = dataclasses.replace(dp, noise_multiplier=s_t) if teacher_steps else dp
        dp_s = dataclasses.replace(dp, noise_multiplier=s_s) if student_steps else dp
    else:
        dp_t = dp_s = dp

    acct = AccountantState()
    ft_teacher = teacher.copy()
    DPSGD(dp_t, data.n, acct, "teacher", stream=TEACHER_STREAM).run(
        ft_teacher, data.features, data.labels, teacher_steps)

    if isinstance(init, Random):
        student = random_model(teacher.dims, n_student_blocks, init.seed)
    elif isinstance(init, ZeroShotPT):
        student = init_student(teacher, n_student_blocks, ZeroShotPT(init.source or teacher), layer_rule)
    elif isinstance(init, ZeroShotFT):
        student = init_student(ft_teacher, n_student_blocks, ZeroShotFT(init.source or ft_teacher), layer_rule)
    else:
        raise TypeError(f"unknown init strategy {init!r}")

    teacher_logits = ft_teacher.logits(data.features)
    DPSGD(dp_s, data.n, acct, "distill", stream=STUDENT_STREAM).run(
        student, data.features, data.labels, student_steps, teacher_logits, kd)
    return PipelineResult(student, acct, delta, "dpkd", init.name,
                          {"teacher": dp_t.noise_multiplier, "distill": dp_s.noise_multiplier},
                          teacher=ft_teacher)


def dpkd_budget(total: PrivacyBudget, teacher_share: float = 0.5) -> BudgetAllocation:
    """Split a total across teacher and distillation phases; student init is free."""
    if not 0 <= teacher_share <= 1:
        raise ValueError("teacher_share must be in [0, 1]")
    return BudgetAllocation(
        PhaseSpend("teacher", PrivacyBudget(total.epsilon * teacher_share, total.delta * teacher_share)),
        PhaseSpend("init", PrivacyBudget(0.0, 0.0)),
        PhaseSpend("distill", PrivacyBudget(total.epsilon * (1 - teacher_share), total.delta * (1 - teacher_share))),
        total)


def dpimp_steps(imp: ImpConfig) -> int:
    return imp.rounds * imp.iters_per_round + imp.final_iters


def structured_dpimp(model: LayeredClassifier, imp: ImpConfig, dp: DpSgdConfig, data: Dataset,
                     accountant: AccountantState | None = None,
                     on_drop: Callable[[DropDecision, LayeredClassifier], None] | None = None) -> PipelineResult:
    """Fine-tune, drop the block holding most of W_min, repeat L times, fine-tune again.

    ``on_drop`` sees each decision and the model just before the block is removed.
    """
    if imp.layers_to_drop is None:
        raise ValueError("structured pruning needs layers_to_drop")
    if imp.layers_to_drop >= model.n_blocks:
        raise ValueError(f"cannot drop {imp.layers_to_drop} of {model.n_blocks} blocks")
    acct = accountant if accountant is not None else AccountantState()
    work = model.copy()
    trainer = DPSGD(dp, data.n, acct, "dpimp", stream=STUDENT_STREAM)
    drops = []
    for _ in range(imp.layers_to_drop):
        trainer.run(work, data.features, data.labels, imp.iters_per_round)
        decision = choose_block_to_drop(work, imp.alpha)
        if on_drop is not None:
            on_drop(decision, work)
        log.info("dropping block %d (origin %d), W_min counts %s", decision.block, decision.origin, decision.counts)
        work.drop_block(decision.block)
        drops.append(decision)
    trainer.run(work, data.features, data.labels, imp.final_iters)
    return PipelineResult(work, acct, data.default_delta(), "dpimp-structured",
                          noise_multiplier={"dpimp": dp.noise_multiplier}, drops=drops,
                          label=f"Dropped({imp.layers_to_drop})")


def unstructured_dpimp(model: LayeredClassifier, imp: ImpConfig, dp: DpSgdConfig, data: Dataset,
                       accountant: AccountantState | None = None,
                       on_round: Callable[[RoundRecord, LayeredClassifier], None] | None = None) -> PipelineResult:
    """Iterative magnitude pruning with rewinding to ``model``.

    Round i fine-tunes, prunes until min(alpha*i, S)% of all prunable weights
    are gone, then resets every surviving parameter to its value in ``model``.
    ``on_round`` sees the record and the model right after the reset.
    """
    if imp.sparsity is None:
        raise ValueError("unstructured pruning needs a sparsity target")
    acct = accountant if accountant is not None else AccountantState()
    original = model.copy()
    work = model.copy()
    trainer = DPSGD(dp, data.n, acct, "dpimp", stream=STUDENT_STREAM)
    rounds = []
    for i in range(1, imp.rounds + 1):
        trainer.run(work, data.features, data.labels, imp.iters_per_round)
        percent = min(imp.alpha * i, imp.sparsity)
        mask = cumulative_mask(work, percent, i)
        work.params = {k: v.copy() for k, v in original.params.items()}
        work.apply_mask(mask)
        rec = RoundRecord(i, percent, mask)
        rounds.append(rec)
        if on_round is not None:
            on_round(rec, work)
        log.info("round %d: %.4g%% pruned", i, 100 * mask.sparsity)
    trainer.run(work, data.features, data.labels, imp.final_iters)
    return PipelineResult(work, acct, data.default_delta(), "dpimp-unstructured",
                          noise_multiplier={"dpimp": dp.noise_multiplier}, rounds=rounds,
                          label=f"SparseModel({imp.sparsity:g}%)")


def surviving_equal_original(model: LayeredClassifier, original: LayeredClassifier) -> bool:
    """Every unpruned parameter bit-equals ``original`` (pruned weights are zero)."""
    for info in model.registry:
        a, b = model.params[info.name], original.params[info.name]
        keep = model.masks.get(info.name, np.ones(a.shape, dtype=bool))
        if not np.array_equal(a[keep].view(np.uint64), b[keep].view(np.uint64)):
            return False
        if np.any(a[~keep] != 0.0):
            return False
    return True
