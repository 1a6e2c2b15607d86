import dataclasses
import math

import numpy as np
import pytest
from scipy import stats

from branchspine._paths import BoundViolation
from branchspine.auxiliary import (
    JumpCapExceeded, aux_drift, aux_expectations, aux_jump_rate, aux_jump_sample, default_burn_in,
    long_run_distribution, simulate_aux, simulate_aux_batch,
)
from branchspine.estimators import mean_se
from branchspine.model_zoo import (
    AffineRate, ConstantRate, closed_form_eigenpair, eigenpair_constant, eigenpair_ou,
    make_asymmetric_mitosis, make_branching_ou, make_equal_mitosis, uniform_split,
)


def test_jump_rate_affine_mitosis():
    m = make_equal_mitosis(AffineRate(1.0, 1.0))
    e = closed_form_eigenpair(m)
    c = e.grad_V(np.array([0.0]))[0]
    x = np.array([0.5, 1.0, 4.0])
    expected = (x + 1.0) * (c * x + 2) / (c * x + 1)
    assert np.allclose(aux_jump_rate(m, e, x), expected, rtol=1e-12)


def test_ou_spine_drift():
    g, s, b = 1.0, 1.0, 0.25
    m = make_branching_ou(1, s, g, 0.0, b)
    e = eigenpair_ou(1, s, g, 0.0, b)
    x = np.array([-2.0, 0.5, 1.5])
    alpha = math.sqrt(g * g - 2 * b * s * s)
    assert np.allclose(aux_drift(m, e, x), -alpha * x, rtol=1e-12)


def test_tcp_spine_mean_relaxation():
    m = make_equal_mitosis(ConstantRate(1.0))
    e = eigenpair_constant(m)
    times = [0.5, 1.0, 2.0]
    vals = aux_expectations(m, e, [3.0], times, 50_000, {"x": lambda y: y}, 0.05, 1)["x"]
    for i, t in enumerate(times):
        est, se = mean_se(vals[:, i])
        assert abs(est - (1 + 2 * math.exp(-t))) < 3 * se


def test_constant_V_jump_law_is_base_law():
    m = make_asymmetric_mitosis(ConstantRate(1.0), uniform_split())
    e = eigenpair_constant(m)
    x = np.full(20_000, 2.0)
    y = aux_jump_sample(m, e, x, np.random.default_rng(2))
    assert stats.kstest(y / 2.0, "uniform").pvalue > 1e-3


def test_affine_V_weighted_jump_law():
    m = make_asymmetric_mitosis(AffineRate(1.0, 1.0), uniform_split())
    e = closed_form_eigenpair(m)
    c = e.grad_V(np.array([0.0]))[0]
    x0 = 3.0
    y = aux_jump_sample(m, e, np.full(20_000, x0), np.random.default_rng(3))
    # fraction density proportional to c q x0 + 1 on [0, 1]
    cdf = lambda q: (c * x0 * q * q / 2 + q) / (c * x0 / 2 + 1)  # noqa: E731
    assert stats.kstest(y / x0, cdf).pvalue > 1e-3


def test_ratio_bound_violation_detected():
    m = make_asymmetric_mitosis(AffineRate(1.0, 1.0), uniform_split())
    e = dataclasses.replace(closed_form_eigenpair(m), ratio_bound=0.5)
    with pytest.raises(BoundViolation):
        aux_jump_sample(m, e, np.full(100, 3.0), np.random.default_rng(0))


def test_jump_cap():
    m = make_equal_mitosis(ConstantRate(5.0))
    e = eigenpair_constant(m)
    with pytest.raises(JumpCapExceeded):
        simulate_aux_batch(m, e, [1.0], [10.0], 0.1, np.random.default_rng(0), n=10, jump_cap=5)


def test_simulate_aux_reproducible():
    m = make_asymmetric_mitosis(AffineRate(1.0, 0.5), uniform_split())
    e = closed_form_eigenpair(m)
    a = simulate_aux(m, e, [1.0], 2.0, 0.1, seed=4)
    b = simulate_aux(m, e, [1.0], 2.0, 0.1, seed=4)
    assert np.array_equal(a.states, b.states)
    assert a.times[-1] == pytest.approx(2.0)
    assert a.jumps == b.jumps


def test_tcp_long_run_mean():
    m = make_equal_mitosis(ConstantRate(1.0))
    e = eigenpair_constant(m)
    mu = long_run_distribution(m, e, [1.0], None, 50_000, 0.5, seed=5)
    assert len(mu) == 50_000
    # chains are independent; per-chain means give an honest stderr
    per_chain = np.bincount(mu.groups, weights=mu.states) / np.bincount(mu.groups)
    est, se = mean_se(per_chain)
    assert abs(est - 1.0) < 3 * se


def test_ou_spine_stationary_variance():
    g, s, b = 1.0, 1.0, 0.25
    m = make_branching_ou(1, s, g, 0.0, b)
    e = eigenpair_ou(1, s, g, 0.0, b)
    alpha = math.sqrt(g * g - 2 * b * s * s)
    st, _ = simulate_aux_batch(m, e, [0.0], [10.0], 0.01, np.random.default_rng(6), n=40_000)
    v = st[:, 0].var()
    assert v == pytest.approx(s * s / (2 * alpha), rel=0.03)


def test_default_burn_in_positive():
    m = make_equal_mitosis(ConstantRate(2.0))
    assert default_burn_in(m, eigenpair_constant(m)) > 0
