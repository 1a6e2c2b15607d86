import json
import math

import numpy as np
import pytest
from scipy import integrate, stats

from branchspine.estimators import (
    MomentTable, RunningStats, closed_moment_tcp, fork_check, fork_closed_constant, growth_bound,
    ks_distance, make_report, martingale_check, mean_se, moment_guard_constant, moment_m1_display,
    mto_battery, ou_closed_forms, ou_literal_limit_cdf, ratio_se, sub_seed, tcp_invariant_cdf,
    tcp_invariant_density, tcp_invariant_mean, wasserstein1d, whole_tree_check, yule_check,
    yule_functionals, yule_variance,
)
from branchspine.model_zoo import (
    AffineRate, ConstantRate, closed_form_eigenpair, eigenpair_constant, make_asymmetric_mitosis,
    make_equal_mitosis, uniform_split,
)


def test_sub_seed_deterministic_and_distinct():
    assert sub_seed(1, 2) == sub_seed(1, 2)
    assert len({sub_seed(1, k) for k in range(50)}) == 50
    assert 0 <= sub_seed(2**63, 7) < 2**63


def test_running_stats_merge_matches_batch():
    x = np.random.default_rng(0).normal(size=1001)
    rs = RunningStats()
    for chunk in np.array_split(x, 7):
        rs.update(chunk)
    assert rs.n == x.size
    assert rs.mean == pytest.approx(x.mean(), abs=1e-12)
    assert rs.var == pytest.approx(x.var(ddof=1), rel=1e-12)
    assert rs.stderr == pytest.approx(mean_se(x)[1], rel=1e-12)


def test_ratio_se_constant_ratio():
    a = np.arange(1.0, 11.0)
    r, se = ratio_se(2 * a, a)
    assert r == pytest.approx(2.0)
    assert se == pytest.approx(0.0, abs=1e-14)


def test_report_rule():
    rep = make_report("x", 1.0, 0.1, 1.25, 0.0, 0)
    assert rep.passed and rep.z == pytest.approx(2.5)
    rep = make_report("x", 1.0, 0.1, 1.35, 0.0, 0)
    assert not rep.passed
    rep = make_report("x", 1.0, 0.1, 1.35, 0.0, 0, allowance=0.1)
    assert rep.passed
    assert make_report("x", 2.0, 0.0, 2.0, 0.0, 0).z == 0.0
    bad = make_report("x", float("nan"), 0.1, 1.0, 0.0, 0)
    assert bad.degenerate and not bad.passed
    d = rep.to_json()
    assert d["pass"] is True and "passed" not in d
    json.dumps(d)


# --- moments ---------------------------------------------------------------


def test_moment_values():
    assert closed_moment_tcp(2, 1.0, 1.0, 1.0) == pytest.approx(3.422198884707849, abs=1e-13)
    assert closed_moment_tcp(0, 1.0, 1.0, 1.0) == pytest.approx(math.e, abs=1e-14)
    assert closed_moment_tcp(1, 1.0, 0.0, 1.0) == pytest.approx(math.e - 1, abs=1e-14)
    # u_2 at x0 = 1, t = 1 in closed form
    assert closed_moment_tcp(2, 1.0, 1.0, 1.0) == pytest.approx(
        math.exp(-0.5) + 4 / 3 * (math.e - math.exp(-0.5)), abs=1e-13)


@pytest.mark.parametrize("x0", [0.0, 0.5, 1.0, 2.0])
def test_first_moment_matches_display(x0):
    t = np.linspace(0, 3, 13)
    for r in (0.5, 1.0, 2.0):
        assert np.allclose(closed_moment_tcp(1, r, x0, t), moment_m1_display(r, x0, t), rtol=0, atol=1e-12)


def test_moments_against_ode_integration():
    r, x0, M = 1.3, 0.7, 4
    ts = np.array([0.25, 0.5, 1.0, 2.0])

    def rhs(t, u):
        du = np.empty_like(u)
        du[0] = r * u[0]
        for m in range(1, M + 1):
            du[m] = m * u[m - 1] + r * (2.0 ** (1 - m) - 1) * u[m]
        return du

    from scipy.integrate import solve_ivp
    sol = solve_ivp(rhs, (0, ts[-1]), x0 ** np.arange(M + 1), t_eval=ts, rtol=1e-12, atol=1e-14)
    table = MomentTable.build(M, r, x0, ts)
    assert np.allclose(table.values, sol.y, rtol=1e-9)


def test_moment_validation():
    with pytest.raises(ValueError):
        closed_moment_tcp(-1, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        closed_moment_tcp(1, 0.0, 1.0, 1.0)


# --- invariant density -----------------------------------------------------


def test_tcp_density_normalised_by_quadrature():
    for r in (0.5, 1.0, 3.0):
        f = lambda x: float(tcp_invariant_density(np.array([x]), r)[0])  # noqa: E731
        mass, _ = integrate.quad(f, 0, np.inf, limit=200)
        mean, _ = integrate.quad(lambda x: x * f(x), 0, np.inf, limit=200)
        assert abs(mass - 1) < 1e-8
        assert abs(mean - 1 / r) < 1e-8
        assert tcp_invariant_mean(r) == pytest.approx(1 / r, abs=1e-12)


def test_tcp_density_shape():
    x = np.linspace(0, 20, 2001)
    d = tcp_invariant_density(x, 1.0)
    assert np.all(d >= 0)
    assert d[0] == 0.0
    assert np.allclose(tcp_invariant_density(x, 2.0), 2 * tcp_invariant_density(2 * x, 1.0), atol=1e-14)
    c = tcp_invariant_cdf(x, 1.0)
    assert np.all(np.diff(c) >= -1e-15)
    assert tcp_invariant_cdf(50.0, 1.0) == pytest.approx(1.0, abs=1e-12)
    # CDF is the integral of the density (trapezoid error is O(h^2))
    xf = np.linspace(0, 20, 20001)
    cum = integrate.cumulative_trapezoid(tcp_invariant_density(xf, 1.0), xf)
    assert np.allclose(tcp_invariant_cdf(xf[1:], 1.0), cum, atol=1e-6)


# --- Yule ------------------------------------------------------------------


def test_yule_functionals_values():
    n, inv = yule_functionals(1.0, math.log(2))
    assert n == pytest.approx(2.0)
    assert inv == pytest.approx(math.log(2), abs=1e-12)
    assert yule_variance(1.0, 1.0) == pytest.approx(math.e * (math.e - 1))
    # geometric law oracle for E[1/N]
    p = math.exp(-1.0)
    k = np.arange(1, 400)
    assert yule_functionals(1.0, 1.0)[1] == pytest.approx(np.sum(p * (1 - p) ** (k - 1) / k), rel=1e-12)


def test_yule_check_passes():
    assert all(r.passed for r in yule_check(1.0, 1.0, 50_000, seed=3))


# --- Wasserstein -----------------------------------------------------------


def test_wasserstein_hand_value():
    assert wasserstein1d([0, 1], [1, 2]) == pytest.approx(1.0)


def test_wasserstein_matches_scipy():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=300), rng.exponential(size=170)
    assert wasserstein1d(a, b) == pytest.approx(stats.wasserstein_distance(a, b), rel=1e-12)
    c = rng.normal(size=300)
    assert wasserstein1d(a, c) == pytest.approx(stats.wasserstein_distance(a, c), rel=1e-12)


def test_wasserstein_weighted_mass():
    with pytest.raises(ValueError):
        wasserstein1d([0.0], [1.0], wa=[1.0], wb=[2.0])
    assert wasserstein1d([0.0], [1.0], wa=[3.0], wb=[3.0]) == pytest.approx(3.0)


# --- OU --------------------------------------------------------------------


def test_ou_closed_forms_against_quadrature():
    cf = ou_closed_forms(1.0, 1.0, 0.0, 0.25, 1.0, 1.0)
    assert cf.Gamma == pytest.approx(0.146447, abs=1e-6)
    assert cf.alpha == pytest.approx(0.707107, abs=1e-6)
    assert cf.lam == pytest.approx(0.146447, abs=1e-6)
    assert cf.mean_population == pytest.approx(cf.mean_population_quad, rel=1e-10)
    assert cf.mean_population == pytest.approx(1.2084091450131513, rel=1e-12)


def test_ou_two_dimensional_product():
    one = ou_closed_forms(1.0, 1.0, 0.0, 0.25, 1.0, 1.0)
    two = ou_closed_forms(1.0, 1.0, 0.0, 0.25, 1.0, [1.0, 1.0], d=2)
    assert two.mean_population == pytest.approx(one.mean_population**2, rel=1e-12)


def test_ou_limit_density():
    cf = ou_closed_forms(1.0, 1.0, 0.0, 0.25, 1.0, 1.0)
    # exp(-Gamma y^2) pi(y) with pi = N(0, sigma^2 / (2 alpha)), normalised by quadrature
    pi = stats.norm(scale=math.sqrt(1 / (2 * cf.alpha)))
    z, _ = integrate.quad(lambda y: math.exp(-cf.Gamma * y * y) * pi.pdf(y), -np.inf, np.inf)
    for y in (-1.5, 0.0, 0.7):
        assert cf.limit_density(y) == pytest.approx(math.exp(-cf.Gamma * y * y) * pi.pdf(y) / z, rel=1e-10)
    assert cf.limit_variance == pytest.approx(1 / (1 + cf.alpha))
    lit = ou_literal_limit_cdf(1.0, 1.0, 0.25)
    assert lit(0.0) == pytest.approx(0.5)


# --- bounds ----------------------------------------------------------------


def test_growth_bound_and_guard_constant():
    assert growth_bound(2, 2, 1.5, 1.0) == pytest.approx(2 * math.exp(1.5))
    assert growth_bound(1, 3, 1.0, 1.0) == pytest.approx(math.exp(2.0))
    assert moment_guard_constant(2.0, 1.0) == 3.0
    with pytest.raises(ValueError):
        moment_guard_constant(0.5, 1.0)


def test_ks_distance():
    x = np.random.default_rng(2).uniform(size=5000)
    assert ks_distance(x, stats.uniform.cdf) < 0.03
    assert ks_distance(x + 0.2, stats.uniform.cdf) > 0.15


# --- Monte Carlo identities --------------------------------------------------


def test_mto_constant_identity():
    m = make_equal_mitosis(ConstantRate(1.0))
    e = eigenpair_constant(m)
    reps = mto_battery(m, e, {"x": lambda x: x, "one": lambda x: np.ones_like(x)}, 1.0, [1.0],
                       20_000, 20_000, seed=4)
    assert all(r.passed for r in reps)
    # both sides are close to 1/r + (x0 - 1/r) e^{-rt} = 1
    assert reps[0].lhs == pytest.approx(1.0, abs=0.03)
    assert reps[0].rhs == pytest.approx(1.0, abs=0.03)
    assert reps[1].z == 0.0


def test_mto_affine_bounded_function():
    m = make_asymmetric_mitosis(AffineRate(1.0, 0.0), uniform_split())
    e = closed_form_eigenpair(m)
    reps = mto_battery(m, e, {"exp_neg": lambda x: np.exp(-x)}, 1.0, [1.0], 20_000, 20_000, seed=5)
    assert reps[0].z < 3


def test_whole_tree_closed_case():
    m = make_equal_mitosis(ConstantRate(1.0))
    rep = whole_tree_check(m, eigenpair_constant(m), lambda x, s: np.ones_like(x), 1.0, 1.0,
                           20_000, 9, seed=6, n_aux=100)
    assert rep.rhs == pytest.approx(math.expm1(1.0), rel=1e-4)
    assert rep.passed


def test_whole_tree_affine_identity():
    m = make_asymmetric_mitosis(AffineRate(1.0, 0.0), uniform_split())
    rep = whole_tree_check(m, closed_form_eigenpair(m), lambda x, s: x, 1.0, 1.0, 20_000, 17, seed=7)
    assert rep.z < 3


def test_fork_closed_case():
    m = make_equal_mitosis(ConstantRate(1.0))
    one = lambda x: np.ones_like(np.asarray(x, dtype=float))  # noqa: E731
    rep = fork_check(m, eigenpair_constant(m), one, one, 1.0, 1.0, 20_000, 9, 10, seed=8)
    assert rep.rhs == pytest.approx(fork_closed_constant(1.0, 1.0), rel=1e-3)
    assert rep.passed


def test_fork_identity_functions():
    m = make_equal_mitosis(ConstantRate(1.0))
    ident = lambda x: np.asarray(x, dtype=float)  # noqa: E731
    rep = fork_check(m, eigenpair_constant(m), ident, ident, 1.0, 0.5, 20_000, 9, 200, seed=9)
    assert rep.z < 3


def test_martingale_flat_constant_rate():
    m = make_equal_mitosis(ConstantRate(1.0))
    rep = martingale_check(m, eigenpair_constant(m), 1.0, [0.0, 0.5, 1.0, 2.0], 20_000, seed=10)
    assert rep.passed


def test_martingale_flat_affine():
    m = make_asymmetric_mitosis(AffineRate(1.0, 0.5), uniform_split())
    rep = martingale_check(m, closed_form_eigenpair(m), 1.0, [0.5, 1.0, 2.0], 20_000, seed=11)
    assert rep.passed
