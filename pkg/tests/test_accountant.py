import math
import time
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpcompress import accountant as A
from oracles import gaussian_epsilon_over_grid, rdp_quadrature


def test_pure_gaussian_rdp_closed_form():
    rdp = A.rdp_subsampled_gaussian(1.0, 1.7, 1)
    np.testing.assert_allclose(rdp, np.array(A.DEFAULT_ORDERS) / (2 * 1.7 ** 2), rtol=1e-15)


def test_zero_steps_is_zero():
    assert np.all(A.rdp_subsampled_gaussian(0.3, 1.0, 0) == 0.0)


def test_zero_noise_is_infinite_not_an_error():
    assert np.all(np.isinf(A.rdp_subsampled_gaussian(0.1, 0.0, 5)))


def test_pure_gaussian_epsilon_matches_oracle():
    state = A.AccountantState()
    state.charge(1.0, 1.0, 1)
    eps, _ = state.to_epsilon(1e-5)
    ref = gaussian_epsilon_over_grid(1.0, 1, 1e-5, A.DEFAULT_ORDERS)
    assert abs(eps - ref) / ref < 1e-6


@pytest.mark.parametrize("alpha", [1.25, 1.5, 2.0, 2.5, 3, 8, 32])
def test_subsampled_rdp_matches_quadrature(alpha):
    orders = (alpha,)
    ours = A.rdp_subsampled_gaussian(0.01, 1.0, 1000, orders)[0]
    ref = 1000 * rdp_quadrature(0.01, 1.0, alpha)
    assert abs(ours - ref) / ref < 1e-3


@pytest.mark.parametrize("q,sigma,alpha", [(0.1, 0.7, 1.5), (0.5, 2.0, 1.75), (0.05, 1.3, 12), (0.2, 4.0, 2.5)])
def test_rdp_matches_quadrature_across_regimes(q, sigma, alpha):
    ours = A.rdp_subsampled_gaussian(q, sigma, 1, (alpha,))[0]
    assert ours == pytest.approx(rdp_quadrature(q, sigma, alpha), rel=1e-6)


def test_empty_ledger_is_zero_epsilon():
    eps, order = A.AccountantState().to_epsilon(1e-5)
    assert eps == 0.0 and math.isnan(order)


def test_charging_in_pieces_equals_charging_at_once():
    a, b = A.AccountantState(), A.AccountantState()
    a.charge(0.02, 1.1, 300)
    a.charge(0.02, 1.1, 700)
    b.charge(0.02, 1.1, 1000)
    assert np.array_equal(a.rdp(), b.rdp())
    assert a.to_epsilon(1e-6) == b.to_epsilon(1e-6)
    assert a.ledger == b.ledger


def test_doubling_steps_never_decreases_epsilon():
    prev = 0.0
    for steps in [1, 2, 4, 8, 16, 64, 256, 1024, 4096]:
        s = A.AccountantState()
        s.charge(0.01, 0.9, steps)
        eps = s.to_epsilon(1e-5)[0]
        assert eps >= prev
        prev = eps


def test_epsilon_decreases_to_zero_in_sigma():
    eps = [A.epsilon_from_rdp(A.rdp_subsampled_gaussian(0.05, s, 500), 1e-5)[0]
           for s in [0.5, 0.8, 1, 2, 4, 8, 16, 64, 256]]
    assert all(x >= y for x, y in zip(eps, eps[1:]))
    # the largest grid order (256) bounds how small the conversion can go
    a = max(A.DEFAULT_ORDERS)
    floor = math.log((a - 1) / a) - (math.log(1e-5) + math.log(a)) / (a - 1)
    assert floor < eps[-1] < floor + 0.005


@settings(max_examples=40, deadline=None)
@given(q=st.floats(0.001, 1.0), q2=st.floats(0.001, 1.0), sigma=st.floats(0.5, 5.0), steps=st.integers(1, 2000))
def test_epsilon_nondecreasing_in_q(q, q2, sigma, steps):
    lo, hi = sorted((q, q2))
    e_lo = A.epsilon_from_rdp(A.rdp_subsampled_gaussian(lo, sigma, steps), 1e-5)[0]
    e_hi = A.epsilon_from_rdp(A.rdp_subsampled_gaussian(hi, sigma, steps), 1e-5)[0]
    assert e_lo <= e_hi * (1 + 1e-12)


def test_default_delta():
    assert A.default_delta(67_000) == pytest.approx(1.4925e-6, rel=1e-4)
    assert A.default_delta(10) == 1 / 100


@pytest.mark.parametrize("target,q,steps", [(4.0, 128 / 4096, 384), (1.0, 0.01, 1000), (8.0, 0.1, 50)])
def test_calibration_round_trip(target, q, steps):
    sigma = A.calibrate_sigma(A.PrivacyBudget(target, 1e-5), q, steps)
    eps = A.epsilon_from_rdp(A.rdp_subsampled_gaussian(q, sigma, steps), 1e-5)[0]
    assert 0.9 * target <= eps <= target


def test_calibration_infeasible_raises():
    with pytest.raises(A.InfeasibleBudgetError):
        A.calibrate_sigma(A.PrivacyBudget(1e-6, 1e-12), 1.0, 10 ** 7)


def test_infinite_target_warns_and_returns_floor():
    with pytest.warns(UserWarning):
        assert A.calibrate_sigma(A.PrivacyBudget(math.inf, 1e-5), 0.1, 10) == A.SIGMA_FLOOR


def test_budget_target_validation():
    with pytest.raises(ValueError):
        A.PrivacyBudget(-1.0, 1e-5)
    with pytest.raises(ValueError):
        A.PrivacyBudget(1.0, 1.0)
    with pytest.raises(ValueError):
        A.calibrate_sigma(A.PrivacyBudget(1.0, 0.0), 0.1, 10)


def test_mnli_shaped_run():
    n = 393_000
    t0 = time.perf_counter()
    state = A.AccountantState()
    state.charge(1024 / n, 0.841, round(75 * n / 1024), "train")
    report = A.privacy_report(state, A.default_delta(n))
    assert time.perf_counter() - t0 < 5
    assert 3.0 <= report["total_epsilon"] <= 6.0
    assert report["accountant"] == A.ACCOUNTANT_NAME


def test_report_shape():
    state = A.AccountantState()
    state.charge(0.01, 1.0, 10, "teacher")
    state.charge(0.01, 1.0, 20, "distill")
    rep = A.privacy_report(state, 1e-5)
    assert set(rep) >= {"total_epsilon", "delta", "per_phase", "order_used", "accountant"}
    assert [p["name"] for p in rep["per_phase"]] == ["teacher", "distill"]
    assert set(rep["per_phase"][0]) == {"name", "q", "sigma", "steps", "epsilon_at_delta"}
    assert rep["total_epsilon"] >= max(p["epsilon_at_delta"] for p in rep["per_phase"])


def test_budget_cap_raises_before_overspending():
    state = A.AccountantState(cap=A.PrivacyBudget(1.0, 1e-5))
    with pytest.raises(A.BudgetExhaustedError):
        for _ in range(100000):
            state.charge(0.1, 1.0)
    assert state.to_epsilon(1e-5)[0] <= 1.0


def test_compose_identity_and_basic():
    e = A.PhaseSpend("a", A.PrivacyBudget(2.5, 1e-6))
    z = A.PhaseSpend("b", A.PrivacyBudget(0.0, 0.0))
    assert A.compose_phases([e, z]) == A.PrivacyBudget(2.5, 1e-6)
    phases = [A.PhaseSpend(str(i), A.PrivacyBudget(eps, 1e-6)) for i, eps in enumerate([1, 2, 1])]
    tot = A.compose_phases(phases, "basic")
    assert tot.epsilon == 4 and tot.delta == pytest.approx(3e-6, rel=1e-12)


def test_rdp_composition_never_worse_than_basic():
    rng = np.random.default_rng(0)
    for _ in range(10):
        phases = []
        for name in ("teacher", "init", "distill"):
            q, sigma, steps = rng.uniform(0.005, 0.1), rng.uniform(0.6, 3), int(rng.integers(10, 2000))
            rec = A.LedgerRecord(name, q, sigma, steps)
            eps = A.epsilon_from_rdp(A.rdp_subsampled_gaussian(q, sigma, steps), 1e-6)[0]
            phases.append(A.PhaseSpend(name, A.PrivacyBudget(eps, 1e-6), [rec]))
        assert A.compose_phases(phases, "rdp").epsilon <= A.compose_phases(phases, "basic").epsilon


def test_shared_sigma_composes_within_total():
    total = A.PrivacyBudget(4.0, 1e-5)
    sched = [(0.03, 100), (0.03, 200)]
    sigma = A.calibrate_shared_sigma(total, sched)
    state = A.AccountantState()
    for q, n in sched:
        state.charge(q, sigma, n)
    assert state.to_epsilon(total.delta)[0] <= 4.0


def test_no_runtime_warnings_in_fractional_orders():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        A.rdp_subsampled_gaussian(0.37, 0.55, 3)
