"""Renyi-DP accounting for Poisson-subsampled Gaussian DPSGD steps.

The per-step RDP bound is the one of Mironov, Talwar and Zhang,
"Renyi Differential Privacy of the Sampled Gaussian Mechanism" (2019):

    A_a = E_{z ~ N(0, s^2)} [((1 - q) + q * exp((2z - 1) / (2 s^2)))^a]
    rdp(a) = log(A_a) / (a - 1)

evaluated by the binomial expansion for integer orders and by their
two-sided erfc series for fractional orders. Conversion to (eps, delta)
uses Proposition 12 of Canonne, Kamath and Steinke (2020):

    eps = rdp(a) + log((a - 1) / a) - (log(delta) + log(a)) / (a - 1)

minimised over the order grid. This is looser than numerical (PRV)
composition; reports tag the variant as ``rdp-subsampled-gaussian-v1``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

ACCOUNTANT_NAME = "rdp-subsampled-gaussian-v1"
DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5, 1.75, 2.0, 2.5) + tuple(float(a) for a in range(3, 257))
SIGMA_FLOOR = 0.01
SIGMA_CEIL = 1000.0
_FRAC_TERMS = 4096
_FRAC_REL_TOL = 1e-8


class InfeasibleBudgetError(ValueError):
    """No noise multiplier within [SIGMA_FLOOR, SIGMA_CEIL] meets the target."""


class BudgetExhaustedError(RuntimeError):
    """A step would push the spend past a hard privacy cap."""


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 <= self.delta < 1:
            raise ValueError(f"delta must be in [0, 1), got {self.delta}")

    def check_target(self):
        if not (self.epsilon > 0 and 0 < self.delta < 1):
            raise ValueError(f"a privacy target needs eps > 0 and 0 < delta < 1, got {self}")


def default_delta(n: int) -> float:
    """delta = 1 / (10 N)."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    return 1.0 / (10.0 * n)


# --- per-step RDP -----------------------------------------------------------

def _log_erfc(x):
    return math.log(2.0) + special.log_ndtr(-np.asarray(x) * math.sqrt(2.0))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    k = np.arange(alpha + 1, dtype=np.float64)
    log_comb = special.gammaln(alpha + 1) - special.gammaln(k + 1) - special.gammaln(alpha - k + 1)
    terms = log_comb + k * math.log(q) + (alpha - k) * math.log1p(-q) + (k * k - k) / (2 * sigma**2)
    return float(special.logsumexp(terms))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # Split the expectation at z0, where q * mu1 = (1 - q) * mu0, and expand
    # (1 - q + q x)^alpha as a generalised binomial series on each side. The
    # coefficients C(alpha, i) alternate in sign once i > alpha + 1; summing
    # their magnitudes instead would only give an upper bound. The tail decays
    # polynomially, so the last two partial sums are averaged.
    z0 = sigma**2 * math.log(1 / q - 1) + 0.5
    i = np.arange(_FRAC_TERMS, dtype=np.float64)
    j = alpha - i
    log_comb = special.gammaln(alpha + 1) - special.gammaln(i + 1) - special.gammaln(j + 1)
    sign = special.gammasgn(j + 1)
    s0 = (log_comb + i * math.log(q) + j * math.log1p(-q) + (i * i - i) / (2 * sigma**2)
          + math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma)))
    s1 = (log_comb + j * math.log(q) + i * math.log1p(-q) + (j * j - j) / (2 * sigma**2)
          + math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma)))
    top = max(np.max(s0), np.max(s1))
    if not np.isfinite(top):
        return math.inf
    terms = sign * (np.exp(s0 - top) + np.exp(s1 - top))
    total = math.fsum(terms[:-1]) + 0.5 * terms[-1]
    if not total > 0:
        return math.inf
    log_a = top + math.log(total)
    tail = abs(terms[-1]) / total
    if tail > _FRAC_REL_TOL * max(abs(log_a), 1e-300):
        logger.warning("fractional-order series did not converge (q=%g, sigma=%g, alpha=%g); "
                       "excluding this order", q, sigma, alpha)
        return math.inf
    return log_a


@lru_cache(maxsize=4096)
def _rdp_one_step(q: float, sigma: float, alpha: float) -> float:
    if q == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    if q == 1.0:
        return alpha / (2 * sigma**2)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return log_a / (alpha - 1)


def rdp_subsampled_gaussian(q: float, sigma: float, steps: int, orders: Sequence[float] = DEFAULT_ORDERS) -> np.ndarray:
    """RDP per order for ``steps`` compositions of the sampled Gaussian mechanism.

    ``sigma == 0`` with ``q > 0`` yields ``inf`` at every order (no privacy)
    rather than raising.
    """
    if not 0 <= q <= 1:
        raise ValueError(f"sampling rate must be in [0, 1], got {q}")
    if sigma < 0:
        raise ValueError(f"noise multiplier must be >= 0, got {sigma}")
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if steps == 0:
        return np.zeros(len(orders))
    per_step = np.array([_rdp_one_step(float(q), float(sigma), float(a)) for a in orders])
    return per_step * steps


def epsilon_from_rdp(rdp: Sequence[float], delta: float, orders: Sequence[float] = DEFAULT_ORDERS) -> tuple[float, float]:
    """Best (eps, order) for the given RDP curve at ``delta``."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    orders = np.asarray(orders, dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    if len(orders) != len(rdp):
        raise ValueError("orders and rdp must have the same length")
    with np.errstate(invalid="ignore", over="ignore"):
        eps = rdp + np.log1p(-1 / orders) - (math.log(delta) + np.log(orders)) / (orders - 1)
    eps = np.where(np.isnan(eps), np.inf, eps)
    i = int(np.argmin(eps))
    return max(float(eps[i]), 0.0), float(orders[i])


# --- stateful accountant ----------------------------------------------------

@dataclass
class LedgerRecord:
    phase: str
    q: float
    sigma: float
    steps: int


@dataclass
class AccountantState:
    """Accumulated spend over DPSGD steps.

    Steps are counted per (q, sigma) pair so charging ``a`` then ``b`` steps
    leaves exactly the same state as charging ``a + b`` at once.
    """

    orders: tuple[float, ...] = DEFAULT_ORDERS
    ledger: list[LedgerRecord] = field(default_factory=list)
    cap: PrivacyBudget | None = None
    _counts: dict[tuple[float, float], int] = field(default_factory=dict, repr=False)

    def charge(self, q: float, sigma: float, steps: int = 1, phase: str = "train"):
        if steps < 0:
            raise ValueError("steps must be >= 0")
        if self.cap is not None and steps > 0:
            eps = self._epsilon_with(q, sigma, steps, self.cap.delta)
            if eps > self.cap.epsilon:
                raise BudgetExhaustedError(
                    f"charging {steps} step(s) at q={q}, sigma={sigma} would reach eps={eps:.4f} "
                    f"> cap {self.cap.epsilon}")
        key = (float(q), float(sigma))
        self._counts[key] = self._counts.get(key, 0) + steps
        last = self.ledger[-1] if self.ledger else None
        if last is not None and (last.phase, last.q, last.sigma) == (phase, key[0], key[1]):
            last.steps += steps
        else:
            self.ledger.append(LedgerRecord(phase, key[0], key[1], steps))

    @property
    def steps(self) -> int:
        return sum(self._counts.values())

    def rdp(self) -> np.ndarray:
        total = np.zeros(len(self.orders))
        for (q, sigma), n in self._counts.items():
            total = total + rdp_subsampled_gaussian(q, sigma, n, self.orders)
        return total

    def _epsilon_with(self, q, sigma, steps, delta):
        rdp = self.rdp() + rdp_subsampled_gaussian(q, sigma, steps, self.orders)
        return epsilon_from_rdp(rdp, delta, self.orders)[0]

    def to_epsilon(self, delta: float) -> tuple[float, float]:
        return to_epsilon(self, delta)

    def phase_rdp(self, phase: str) -> np.ndarray:
        total = np.zeros(len(self.orders))
        for rec in self.ledger:
            if rec.phase == phase:
                total = total + rdp_subsampled_gaussian(rec.q, rec.sigma, rec.steps, self.orders)
        return total

    def phases(self) -> list[str]:
        seen: list[str] = []
        for rec in self.ledger:
            if rec.phase not in seen:
                seen.append(rec.phase)
        return seen


def to_epsilon(state: AccountantState, delta: float) -> tuple[float, float]:
    """(eps, order) spent so far at ``delta``; an empty ledger costs nothing."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if state.steps == 0:
        return 0.0, float("nan")
    return epsilon_from_rdp(state.rdp(), delta, state.orders)


# --- calibration ------------------------------------------------------------

def _bisect_sigma(eps_of_sigma, target_eps, rel_tol=1e-4):
    hi = SIGMA_CEIL
    if eps_of_sigma(hi) > target_eps:
        raise InfeasibleBudgetError(
            f"target eps={target_eps} is not reachable with sigma <= {SIGMA_CEIL}")
    lo = SIGMA_FLOOR
    if eps_of_sigma(lo) <= target_eps:
        return lo
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if eps_of_sigma(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi


def calibrate_sigma(target: PrivacyBudget, q: float, steps: int, orders: Sequence[float] = DEFAULT_ORDERS) -> float:
    """Smallest noise multiplier (to 1e-4 relative) whose spend stays within ``target``."""
    return calibrate_shared_sigma(target, [(q, steps)], orders)


def calibrate_shared_sigma(target: PrivacyBudget, schedule: Iterable[tuple[float, int]],
                           orders: Sequence[float] = DEFAULT_ORDERS) -> float:
    """One noise multiplier for several (q, steps) phases composed under RDP."""
    schedule = [(float(q), int(n)) for q, n in schedule]
    if math.isinf(target.epsilon):
        warnings.warn(f"infinite epsilon target; returning the minimum noise multiplier {SIGMA_FLOOR}",
                      stacklevel=2)
        return SIGMA_FLOOR
    target.check_target()
    if all(n == 0 or q == 0 for q, n in schedule):
        return SIGMA_FLOOR

    def eps_of(sigma):
        rdp = sum(rdp_subsampled_gaussian(q, sigma, n, orders) for q, n in schedule)
        return epsilon_from_rdp(rdp, target.delta, orders)[0]

    return _bisect_sigma(eps_of, target.epsilon)


# --- phase composition ------------------------------------------------------

@dataclass
class PhaseSpend:
    """Budget attributed to one pipeline phase, with its ledger when known."""

    name: str
    budget: PrivacyBudget
    records: list[LedgerRecord] = field(default_factory=list)


@dataclass
class BudgetAllocation:
    """Per-phase split of a total budget: teacher fine-tune, student init, distillation."""

    teacher: PhaseSpend
    init: PhaseSpend
    distill: PhaseSpend
    total: PrivacyBudget | None = None

    def phases(self) -> list[PhaseSpend]:
        return [self.teacher, self.init, self.distill]


def compose_phases(allocation: BudgetAllocation | Sequence[PhaseSpend], rule: str = "auto",
                   orders: Sequence[float] = DEFAULT_ORDERS) -> PrivacyBudget:
    """Total (eps, delta) of sequentially composed phases.

    ``rule="rdp"`` adds the phases' RDP curves and converts once at the summed
    delta; it needs every charged phase to carry ledger records. ``"basic"``
    sums eps and delta. ``"auto"`` uses RDP when records are available and
    falls back to basic composition otherwise.
    """
    phases = allocation.phases() if isinstance(allocation, BudgetAllocation) else list(allocation)
    delta = sum(p.budget.delta for p in phases)
    basic = PrivacyBudget(sum(p.budget.epsilon for p in phases), delta)
    charged = [p for p in phases if p.budget.epsilon > 0 or p.records]
    have_records = all(p.records for p in charged)
    if rule == "basic" or (rule == "auto" and not have_records):
        return basic
    if rule not in ("rdp", "auto"):
        raise ValueError(f"unknown composition rule {rule!r}")
    if not have_records:
        raise ValueError("RDP composition needs ledger records for every charged phase")
    if not charged:
        return PrivacyBudget(0.0, delta)
    rdp = np.zeros(len(orders))
    for p in charged:
        for rec in p.records:
            rdp = rdp + rdp_subsampled_gaussian(rec.q, rec.sigma, rec.steps, orders)
    eps, _ = epsilon_from_rdp(rdp, delta, orders)
    return PrivacyBudget(eps, delta)


def privacy_report(state: AccountantState, delta: float) -> dict:
    """JSON-ready summary: composed eps plus each phase's standalone eps at ``delta``."""
    total, order = to_epsilon(state, delta)
    per_phase = []
    for rec in state.ledger:
        eps = epsilon_from_rdp(rdp_subsampled_gaussian(rec.q, rec.sigma, rec.steps, state.orders),
                               delta, state.orders)[0] if rec.steps else 0.0
        per_phase.append({"name": rec.phase, "q": rec.q, "sigma": rec.sigma,
                          "steps": rec.steps, "epsilon_at_delta": eps})
    return {
        "total_epsilon": total,
        "delta": delta,
        "per_phase": per_phase,
        "order_used": None if math.isnan(order) else order,
        "accountant": ACCOUNTANT_NAME,
    }
