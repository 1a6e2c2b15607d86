"""Closed-form evaluators and Monte Carlo verifiers.

Every verifier returns a :class:`CheckReport` comparing a population-side
estimate (lhs) with a spine-side or closed-form value (rhs).  A report
passes when |lhs - rhs| <= 3 * sqrt(lhs_stderr^2 + rhs_stderr^2) plus an
explicitly stated deterministic allowance (time step or quadrature error).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, stats

from ._paths import child_seed
from . import pde
from .auxiliary import aux_expectations, long_run_distribution, simulate_aux_batch
from .branching_sim import SimConfig, SimResult, run_replicas, simulate
from .model_zoo import (ConstantRate, EigenPair, InvalidModelError, ModelSpec, make_equal_mitosis,
                        ou_exponents)

Array = np.ndarray
SIGMAS = 3.0


def sub_seed(seed: int, tag: int) -> int:
    """Deterministic 63-bit seed for an independent sub-experiment."""
    return int(np.random.SeedSequence([int(seed), int(tag)]).generate_state(1, np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# accumulators and reports


class RunningStats:
    """Streaming count / mean / M2 with order-independent merging."""

    def __init__(self) -> None:
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, values) -> "RunningStats":
        v = np.asarray(values, dtype=float).reshape(-1)
        if v.size == 0:
            return self
        other = RunningStats()
        other.n = v.size
        other.mean = float(v.mean())
        other.m2 = float(np.sum((v - other.mean) ** 2))
        return self.merge(other)

    def merge(self, other: "RunningStats") -> "RunningStats":
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean, other.m2
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean += delta * other.n / n
        self.m2 += other.m2 + delta * delta * self.n * other.n / n
        self.n = n
        return self

    @property
    def var(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else float("nan")

    @property
    def stderr(self) -> float:
        return math.sqrt(self.var / self.n) if self.n > 1 else float("nan")


def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size < 2:
        return float(x.mean()) if x.size else float("nan"), float("nan")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def ratio_se(a, b) -> tuple[float, float]:
    """mean(a) / mean(b) with its delta-method standard error."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mb = b.mean()
    if mb == 0:
        return float("nan"), float("nan")
    r = a.mean() / mb
    resid = (a - r * b) / mb
    return float(r), float(resid.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else float("nan")


@dataclass
class CheckReport:
    name: str
    lhs: float
    lhs_stderr: float
    rhs: float
    rhs_stderr: float
    z: float
    passed: bool
    seed: int
    params: dict = field(default_factory=dict)
    allowance: float = 0.0
    degenerate: bool = False
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return _jsonable(d)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.name}: lhs={self.lhs:.6g}±{self.lhs_stderr:.2g} "
                f"rhs={self.rhs:.6g}±{self.rhs_stderr:.2g} z={self.z:.3g}")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else repr(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, (str, int, bool)) or x is None:
        return x
    return repr(x)


def make_report(name: str, lhs: float, lhs_se: float, rhs: float, rhs_se: float, seed: int,
                params: Optional[dict] = None, allowance: float = 0.0,
                extra: Optional[dict] = None) -> CheckReport:
    lse = 0.0 if not math.isfinite(lhs_se) else lhs_se
    rse = 0.0 if not math.isfinite(rhs_se) else rhs_se
    degenerate = not (math.isfinite(lhs) and math.isfinite(rhs))
    comb = math.hypot(lse, rse)
    diff = abs(lhs - rhs) if not degenerate else float("inf")
    if diff == 0.0:
        z = 0.0
    elif comb > 0:
        z = diff / comb
    else:
        z = float("inf")
    passed = (not degenerate) and diff <= SIGMAS * comb + allowance
    return CheckReport(name, float(lhs), lse, float(rhs), rse, float(z), bool(passed), int(seed),
                       dict(params or {}), float(allowance), degenerate, dict(extra or {}))


# ---------------------------------------------------------------------------
# closed forms for constant-rate equal mitosis


def _moment_coeffs(m: int, r: float, x0: float) -> tuple[Array, Array]:
    """u_m(t) = sum_i A[m, i] exp(kappa_i t), kappa_i = r (2^(1-i) - 1)."""
    kappa = r * (2.0 ** (1 - np.arange(m + 1)) - 1.0)
    A = np.zeros((m + 1, m + 1))
    A[0, 0] = 1.0
    for k in range(1, m + 1):
        A[k, :k] = k * A[k - 1, :k] / (kappa[:k] - kappa[k])
        A[k, k] = x0**k - A[k, :k].sum()
    return A, kappa


def closed_moment_tcp(m: int, r: float, x0: float, t) -> Array:
    """E[Z_t(x^m)] for constant-rate equal mitosis started from one cell at x0.

    Solves u_m' = m u_{m-1} + r (2^(1-m) - 1) u_m, u_m(0) = x0^m, in closed form.
    """
    if m < 0 or int(m) != m:
        raise ValueError("moment order must be a non-negative integer")
    if r <= 0:
        raise ValueError("rate must be positive")
    A, kappa = _moment_coeffs(int(m), r, x0)
    t = np.asarray(t, dtype=float)
    out = np.tensordot(np.exp(np.multiply.outer(t, kappa)), A[int(m)], axes=([-1], [0]))
    return out if out.ndim else float(out)


def moment_m1_display(r: float, x0: float, t):
    """First moment in the form e^{rt}[1/r - (1/r - x) e^{-rt}]."""
    t = np.asarray(t, dtype=float)
    return np.exp(r * t) * (1.0 / r - (1.0 / r - x0) * np.exp(-r * t))


@dataclass
class MomentTable:
    r: float
    x0: float
    times: Array
    values: Array  # (M + 1, len(times))

    @classmethod
    def build(cls, max_order: int, r: float, x0: float, times) -> "MomentTable":
        times = np.atleast_1d(np.asarray(times, dtype=float))
        vals = np.array([np.atleast_1d(closed_moment_tcp(m, r, x0, times)) for m in range(max_order + 1)])
        return cls(r, x0, times, vals)


_TCP_PROD = float(np.prod(1.0 - 2.0 ** -np.arange(1, 80)))


def _tcp_coeffs(tol: float) -> Array:
    c = [1.0]
    n = 0
    while True:
        n += 1
        nxt = c[-1] * 2.0 / (1.0 - 2.0**n)
        c.append(nxt)
        if abs(nxt) < tol * 1e-3 or n > 60:
            return np.array(c)


def tcp_invariant_density(x, r: float, tol: float = 1e-16) -> Array:
    """Stationary density of the TCP process x' = 1, x -> x/2 at rate 2r.

    (2r / prod(1 - 2^-n)) sum_n c_n exp(-2^(n+1) r x), c_n = prod_{k<=n} 2 / (1 - 2^k);
    summation stops once the next term is below tol times the partial sum.
    Near x = 0 the series cancels to round-off; those values are clipped at 0.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("density is supported on [0, inf)")
    c = _tcp_coeffs(tol)
    out = np.zeros_like(x)
    for n, cn in enumerate(c):
        term = cn * np.exp(-(2.0 ** (n + 1)) * r * x)
        out = out + term
        if n > 0 and np.all(np.abs(term) <= tol * np.maximum(np.abs(out), 1e-300)):
            break
    # the exact density is non-negative; only round-off of order 1e-16 is removed
    return 2.0 * r / _TCP_PROD * np.maximum(out, 0.0)


def tcp_invariant_cdf(x, r: float, tol: float = 1e-16) -> Array:
    x = np.asarray(x, dtype=float)
    c = _tcp_coeffs(tol)
    lam = 2.0 ** (np.arange(c.size) + 1) * r
    terms = c * -np.expm1(-np.multiply.outer(np.maximum(x, 0.0), lam)) / lam
    return 2.0 * r / _TCP_PROD * terms.sum(axis=-1)


def tcp_invariant_mean(r: float) -> float:
    c = _tcp_coeffs(1e-16)
    lam = 2.0 ** (np.arange(c.size) + 1) * r
    return float(2.0 * r / _TCP_PROD * np.sum(c / lam**2))


def yule_functionals(r: float, t: float) -> tuple[float, float]:
    """(E[N_t], E[1/N_t]) for the Yule process of rate r from one cell."""
    if t <= 0:
        return 1.0, 1.0
    q = math.exp(-r * t)
    return math.exp(r * t), r * t * q / -math.expm1(-r * t)


def yule_variance(r: float, t: float) -> float:
    return math.exp(r * t) * math.expm1(r * t)


# ---------------------------------------------------------------------------
# Wasserstein distance


def wasserstein1d(a, b, wa=None, wb=None, rtol: float = 1e-9) -> float:
    """Exact W1 between two 1-D measures (quantile coupling).

    Unweighted samples are read as empirical probability measures; weighted
    ones must carry equal total mass, and the distance scales with it.
    """
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be non-empty")
    if wa is None and wb is None:
        if a.size == b.size:
            return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
        return float(stats.wasserstein_distance(a, b))
    wa = np.ones(a.size) if wa is None else np.asarray(wa, dtype=float)
    wb = np.ones(b.size) if wb is None else np.asarray(wb, dtype=float)
    ta, tb = wa.sum(), wb.sum()
    if not math.isclose(ta, tb, rel_tol=rtol):
        raise ValueError(f"total masses differ: {ta} vs {tb}")
    return float(ta * stats.wasserstein_distance(a, b, wa, wb))


# ---------------------------------------------------------------------------
# helpers shared by the Monte Carlo checks


def _simpson(T: float, quad_points: int) -> tuple[Array, Array]:
    if quad_points < 3:
        raise ValueError("need at least 3 quadrature points")
    if quad_points % 2 == 0:
        quad_points += 1
    s = np.linspace(0.0, T, quad_points)
    w = np.ones(quad_points)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return s, w * (T / (quad_points - 1) / 3.0)


def _tree_functionals(model, x0, times, n, seed, fns, dt, jobs, batch=None):
    cfg = SimConfig(T=float(max(times)), dt=dt, seed=seed, snapshot_times=sorted(set(times)))

    def reduce(res: SimResult):
        return {(nm, t): res.functional(t, f) for nm, f in fns.items() for t in cfg.snapshot_times}

    parts = run_replicas(model, [x0] if np.ndim(x0) == 0 else x0, cfg, n, reduce, jobs=jobs, batch=batch)
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def _ones(x):
    return np.ones(np.asarray(x).shape[0])


# ---------------------------------------------------------------------------
# many-to-one checks


def mto_battery(model: ModelSpec, eig: EigenPair, fns: dict, x0, times: Sequence[float],
                n_tree: int, n_aux: int, seed: int, dt: float = 0.05, jobs: int = 1) -> list[CheckReport]:
    """Weighted many-to-one for every (f, t): one tree run and one aux run shared."""
    times = sorted(float(t) for t in times)
    tree_f = {"V": eig.V}
    for nm, f in fns.items():
        tree_f["Vf:" + nm] = (lambda x, f=f: eig.V(x) * f(x))
    tree = _tree_functionals(model, x0, times, n_tree, sub_seed(seed, 0), tree_f, dt, jobs)
    aux = aux_expectations(model, eig, x0, times, n_aux, fns, dt, sub_seed(seed, 1))
    out = []
    for nm in fns:
        for i, t in enumerate(times):
            lhs, lse = ratio_se(tree[("Vf:" + nm, t)], tree[("V", t)])
            rhs, rse = mean_se(aux[nm][:, i])
            out.append(make_report(
                f"mto[{model.name},{nm},t={t:g}]", lhs, lse, rhs, rse, seed,
                {"model": model.name, "f": nm, "t": t, "x0": x0, "n_tree": n_tree, "n_aux": n_aux, "dt": dt}))
    return out


def weighted_mto_check(model: ModelSpec, eig: EigenPair, f: Callable, x0, t: float,
                       n_tree_replicas: int, n_aux_replicas: int, seed: int,
                       dt: float = 0.05, jobs: int = 1, name: str = "f") -> CheckReport:
    """E[sum V f(X)] / E[sum V(X)] against E[f(Y_t)]."""
    return mto_battery(model, eig, {name: f}, x0, [t], n_tree_replicas, n_aux_replicas,
                       seed, dt, jobs)[0]


def whole_tree_check(model: ModelSpec, eig: EigenPair, f: Callable, x0: float, T: float,
                     replicas: int, quad_points: int, seed: int, n_aux: Optional[int] = None,
                     dt: float = 0.05, jobs: int = 1) -> CheckReport:
    """Sum of f(X_{beta-}, beta) over deaths up to T versus the spine time integral.

    ``f(x, s)`` must be non-negative.  The right side uses composite Simpson
    over ``quad_points`` nodes with the same spine paths at every node; the
    allowance is the Richardson estimate |S_h - S_2h| / 15 of the
    quadrature error.
    """
    n_aux = n_aux or replicas
    params = {"model": model.name, "x0": x0, "T": T, "replicas": replicas, "n_aux": n_aux,
              "quad_points": quad_points, "dt": dt}
    if T <= 0:
        return make_report(f"whole_tree[{model.name}]", 0.0, 0.0, 0.0, 0.0, seed, params)
    cfg = SimConfig(T=T, dt=dt, seed=sub_seed(seed, 0))

    def reduce(res: SimResult):
        dead = res.dead_mask()
        vals = np.asarray(f(res.death_state[dead], res.death_time[dead]), dtype=float)
        return np.bincount(res.replica[dead], weights=vals, minlength=res.n_replicas)

    lhs_vals = np.concatenate(run_replicas(model, [x0], cfg, replicas, reduce, jobs=jobs))
    s, w = _simpson(T, quad_points)
    v0 = float(eig.V(np.atleast_1d(float(x0)))[0])
    h_fine = np.zeros(n_aux)
    h_coarse = np.zeros(n_aux)
    s2, w2 = _simpson(T, (s.size - 1) // 2 + 1) if s.size >= 5 else (None, None)
    batch = 20_000
    for c, start in enumerate(range(0, n_aux, batch)):
        m = min(batch, n_aux - start)
        rng = np.random.default_rng(child_seed(sub_seed(seed, 1), c))
        st, _ = simulate_aux_batch(model, eig, [x0], s, dt, rng, n=m)
        vals = np.stack([
            np.asarray(f(st[:, i], np.full(m, s[i])), dtype=float)
            * model.rate(st[:, i]) / eig.V(st[:, i]) * v0 * math.exp(eig.lambda0 * s[i])
            for i in range(s.size)], axis=1)
        h_fine[start:start + m] = vals @ w
        if s2 is not None:
            h_coarse[start:start + m] = vals[:, ::2] @ w2
    lhs, lse = mean_se(lhs_vals)
    rhs, rse = mean_se(h_fine)
    allowance = abs(rhs - h_coarse.mean()) / 15.0 if s2 is not None else 0.0
    return make_report(f"whole_tree[{model.name}]", lhs, lse, rhs, rse, seed, params, allowance)


def fork_check(model: ModelSpec, eig: EigenPair, f: Callable, g: Callable, x0: float, t: float,
               replicas: int, quad_points: int, inner_replicas: int, seed: int,
               outer_replicas: Optional[int] = None, dt: float = 0.05, pop_cap: float = 1e4,
               jobs: int = 1) -> CheckReport:
    """Distinct ordered pairs of alive particles versus the fork formula.

    lhs: E[sum_{u != v} f V(X^u) g V(X^v)].
    rhs: e^{2 lambda0 t} V(x0) int_0^t E[J2(V P_{t-s} f, V P_{t-s} g)(Y_s) r(Y_s)/V(Y_s)] e^{-lambda0 s} ds.
    J2 is estimated without bias by drawing (k, theta) at Y_s and launching
    ``inner_replicas`` independent spine paths from every child; the two
    factors of each ordered pair therefore use independent inner samples.
    """
    outer = outer_replicas or max(200, replicas // 100)
    params = {"model": model.name, "x0": x0, "t": t, "replicas": replicas, "outer": outer,
              "inner_replicas": inner_replicas, "quad_points": quad_points, "dt": dt}
    name = f"fork[{model.name}]"
    if t <= 0:
        return make_report(name, 0.0, 0.0, 0.0, 0.0, seed, params)
    cfg = SimConfig(T=t, dt=dt, seed=sub_seed(seed, 0), snapshot_times=[t])

    def reduce(res: SimResult):
        idx, xs = res._snap(t)
        rep = res.replica[idx]
        fv = np.asarray(f(xs), dtype=float) * eig.V(xs)
        gv = np.asarray(g(xs), dtype=float) * eig.V(xs)
        n = res.n_replicas
        sf = np.bincount(rep, weights=fv, minlength=n)
        sg = np.bincount(rep, weights=gv, minlength=n)
        sfg = np.bincount(rep, weights=fv * gv, minlength=n)
        return np.stack([sf * sg - sfg, np.bincount(rep, minlength=n)], axis=1)

    lhs_all = np.concatenate(run_replicas(model, [x0], cfg, replicas, reduce, jobs=jobs))
    if lhs_all[:, 1].mean() > pop_cap:
        raise ValueError(f"mean population {lhs_all[:, 1].mean():.0f} exceeds pop_cap={pop_cap:g}; "
                         "reduce t or raise pop_cap")
    lhs, lse = mean_se(lhs_all[:, 0])

    s, w = _simpson(t, quad_points)
    rng = np.random.default_rng(child_seed(sub_seed(seed, 1), 0))
    st, _ = simulate_aux_batch(model, eig, [x0], s, dt, rng, n=outer)
    v0 = float(eig.V(np.atleast_1d(float(x0)))[0])
    est = np.zeros(outer)
    for i, si in enumerate(s):
        y = st[:, i]
        j2 = _j2_estimate(model, eig, f, g, y, t - si, inner_replicas, dt, rng)
        est += w[i] * j2 * model.rate(y) / eig.V(y) * math.exp(-eig.lambda0 * si)
    est *= math.exp(2 * eig.lambda0 * t) * v0
    rhs, rse = mean_se(est)
    return make_report(name, lhs, lse, rhs, rse, seed, params)


def _j2_estimate(model, eig, f, g, y, horizon, inner, dt, rng) -> Array:
    """Unbiased single-draw estimate of J2(V P_h f, V P_h g)(y) per state."""
    n = y.shape[0]
    p = model.pmf(y)
    k = np.minimum((np.cumsum(p, axis=1) < rng.random(n)[:, None]).sum(axis=1), model.kbar)
    theta = rng.random(n)
    out = np.zeros(n)
    for kv in np.unique(k):
        if kv < 2:
            continue
        sel = np.flatnonzero(k == kv)
        children = [model.frag_map(int(kv), j, y[sel], theta[sel]) for j in range(1, kv + 1)]
        pf, pg = [], []
        for c in children:
            if horizon > 0:
                paths, _ = simulate_aux_batch(model, eig, np.repeat(c, inner, axis=0), [horizon], dt, rng)
                end = paths[:, 0].reshape((sel.size, inner) + c.shape[1:])
                flat = end.reshape((-1,) + c.shape[1:])
                fv = np.asarray(f(flat), dtype=float).reshape(sel.size, inner).mean(axis=1)
                gv = np.asarray(g(flat), dtype=float).reshape(sel.size, inner).mean(axis=1)
            else:
                fv, gv = np.asarray(f(c), dtype=float), np.asarray(g(c), dtype=float)
            vc = eig.V(c)
            pf.append(vc * fv)
            pg.append(vc * gv)
        pf, pg = np.array(pf), np.array(pg)
        out[sel] = pf.sum(0) * pg.sum(0) - np.sum(pf * pg, axis=0)
    return out


def fork_closed_constant(r: float, t: float) -> float:
    """E[N_t (N_t - 1)] for the Yule process: 2 e^{rt} (e^{rt} - 1)."""
    return 2.0 * math.exp(r * t) * math.expm1(r * t)


# ---------------------------------------------------------------------------
# martingale and long-time checks


def martingale_check(model: ModelSpec, eig: EigenPair, x0, times: Sequence[float], replicas: int,
                     seed: int, dt: float = 0.05, jobs: int = 1) -> CheckReport:
    """Flatness of t -> E[Z_t(V)] e^{-lambda0 t} / V(x0) across the given times.

    Pairwise z-scores use paired differences on the same replicas; the
    report's z is the largest of them and lhs is the terminal mean, whose
    per-replica values are the W estimates.
    """
    times = sorted(float(t) for t in times)
    if len(times) < 2:
        raise ValueError("need at least two times")
    v0 = float(eig.V(model.states(x0))[0])
    pos = [t for t in times if t > 0]
    vals = _tree_functionals(model, x0, pos, replicas, sub_seed(seed, 0), {"V": eig.V}, dt, jobs)
    M = {t: (vals[("V", t)] * math.exp(-eig.lambda0 * t) / v0 if t > 0 else np.ones(replicas))
         for t in times}
    zs = {}
    for i, ti in enumerate(times):
        for tj in times[i + 1:]:
            d, se = mean_se(M[tj] - M[ti])
            zs[f"{ti:g}-{tj:g}"] = abs(d) / se if se > 0 else (0.0 if d == 0 else float("inf"))
    means = {f"{t:g}": mean_se(M[t]) for t in times}
    W = M[times[-1]]
    lhs, lse = mean_se(W)
    zmax = max(zs.values())
    rep = make_report(f"martingale[{model.name}]", lhs, lse, 1.0, 0.0, seed,
                      {"model": model.name, "x0": x0, "times": times, "replicas": replicas, "dt": dt},
                      extra={"pairwise_z": zs, "means": means,
                             "W_quantiles": np.quantile(W, [0.05, 0.25, 0.5, 0.75, 0.95]).tolist(),
                             "W_zero_fraction": float(np.mean(W == 0))})
    rep.z = zmax
    rep.passed = bool(zmax <= SIGMAS)
    return rep


def spine_ratio(model: ModelSpec, eig: EigenPair, g: Callable, x0, n_samples: int, seed: int,
                burn_in: Optional[float] = None, thinning_interval: float = 0.5,
                n_chains: int = 1000, dt: float = 0.01) -> tuple[float, float, np.ndarray]:
    """int (g/V) dpi / int (1/V) dpi from long-run spine samples.

    Chains are independent, so the delta-method error is computed from
    per-chain sums.
    """
    mu = long_run_distribution(model, eig, x0, burn_in, n_samples, thinning_interval, seed,
                               n_chains=n_chains, dt=dt)
    v = eig.V(mu.states)
    gv = np.asarray(g(mu.states), dtype=float) / v
    if not np.all(np.isfinite(gv)):
        raise ValueError("g / V is not bounded on the spine samples")
    iv = 1.0 / v
    a = np.bincount(mu.groups, weights=gv)
    b = np.bincount(mu.groups, weights=iv)
    r, se = ratio_se(a, b)
    return r, se, mu.states


def longtime_limit_check(model: ModelSpec, eig: EigenPair, g: Callable, x0, t_large: float,
                         replicas: int, seed: int, n_pi: int = 100_000, allowance: float = 0.0,
                         dt: float = 0.05, batch: int = 1, jobs: int = 1,
                         thinning_interval: float = 0.5, max_particles: float = 4e6,
                         target: Optional[float] = None) -> CheckReport:
    """Population average of g at t_large versus the spine limit ratio.

    Replicas are run ``batch`` at a time (default one) to bound memory for
    large populations; replicas with no survivors are excluded.  The
    population is geometric-tailed, so ``max_particles`` sits well above
    its mean.  ``target`` replaces the spine estimate by a known exact value.
    """
    cfg = SimConfig(T=t_large, dt=dt, seed=sub_seed(seed, 0), snapshot_times=[t_large],
                    max_particles=max_particles)

    def reduce(res: SimResult):
        return np.stack([res.functional(t_large, g), res.counts(t_large)], axis=1)

    parts = np.concatenate(run_replicas(model, [x0] if np.ndim(x0) == 0 else x0, cfg, replicas,
                                        reduce, jobs=jobs, batch=batch))
    alive = parts[:, 1] > 0
    params = {"model": model.name, "x0": x0, "t": t_large, "replicas": replicas, "n_pi": n_pi, "dt": dt}
    if not np.any(alive):
        return make_report(f"longtime[{model.name}]", float("nan"), float("nan"), float("nan"),
                           float("nan"), seed, params)
    avg = parts[alive, 0] / parts[alive, 1]
    lhs, lse = mean_se(avg)
    if target is not None:
        rhs, rse = float(target), 0.0
    else:
        rhs, rse, _ = spine_ratio(model, eig, g, x0, n_pi, sub_seed(seed, 1),
                                  thinning_interval=thinning_interval)
    return make_report(f"longtime[{model.name}]", lhs, lse, rhs, rse, seed, params, allowance,
                       extra={"surviving": int(alive.sum()), "mean_population": float(parts[alive, 1].mean())})


def ks_distance(samples, cdf: Callable) -> float:
    return float(stats.kstest(np.asarray(samples, dtype=float).reshape(-1), cdf).statistic)


# ---------------------------------------------------------------------------
# Yule and moment checks


def yule_check(r: float, t: float, replicas: int, seed: int, jobs: int = 1) -> list[CheckReport]:
    """Mean, variance and E[1/N_t] of the Yule population against the geometric law."""
    model = make_equal_mitosis(ConstantRate(r))
    vals = _tree_functionals(model, 1.0, [t], replicas, seed, {"N": _ones}, 1.0, jobs)
    N = vals[("N", t)]
    mean_n, inv_n = yule_functionals(r, t)
    var_n = yule_variance(r, t)
    p = {"r": r, "t": t, "replicas": replicas}
    m, se = mean_se(N)
    # variance estimator stderr from the fourth central moment
    c = N - N.mean()
    v = float(np.var(N, ddof=1))
    se_v = math.sqrt(max(np.mean(c**4) - v * v, 0.0) / N.size)
    mi, sei = mean_se(1.0 / N)
    return [
        make_report("yule_mean", m, se, mean_n, 0.0, seed, p),
        make_report("yule_var", v, se_v, var_n, 0.0, seed, p),
        make_report("yule_inv_mean", mi, sei, inv_n, 0.0, seed, p),
    ]


def moments_check(r: float, x0: float, t: float, orders: Sequence[int], replicas: int, seed: int,
                  jobs: int = 1) -> list[CheckReport]:
    model = make_equal_mitosis(ConstantRate(r))
    fns = {m: (lambda x, m=m: np.asarray(x, dtype=float) ** m) for m in orders}
    vals = _tree_functionals(model, x0, [t], replicas, seed, fns, 1.0, jobs)
    out = []
    for m in orders:
        est, se = mean_se(vals[(m, t)])
        out.append(make_report(f"moment[m={m},x0={x0:g},t={t:g}]", est, se,
                               float(closed_moment_tcp(m, r, x0, t)), 0.0, seed,
                               {"r": r, "x0": x0, "t": t, "m": m, "replicas": replicas}))
    return out


# ---------------------------------------------------------------------------
# fluctuation variance


def variance_bracket_check(model: ModelSpec, f: Callable, n_scale: int, t: float, replicas: int,
                           pde_solution, seed: int, init_sampler: Callable = None,
                           rel_tol: float = 0.10, jobs: int = 1, dt: float = 0.05) -> CheckReport:
    """n Var(X^(n)_t(f)) across replicas against the predictable bracket.

    ``pde_solution`` is a :class:`pde.BracketSolution` (forward mean measure
    plus backward test functions f_s = T_{t-s} f on one grid).  Each replica
    starts from ``n_scale`` i.i.d. particles drawn by ``init_sampler(rng, n)``.
    Tolerance: rel_tol * bracket + 3 combined stderr.
    """
    if replicas < 100:
        raise ValueError("variance bracket check needs at least 100 replicas")
    if init_sampler is None:
        raise ValueError("init_sampler is required")
    cfg = SimConfig(T=t, dt=dt, seed=seed, snapshot_times=[t])

    def init(rng):
        return init_sampler(rng, n_scale)

    def reduce(res: SimResult):
        return res.functional(t, f) / n_scale

    vals = np.concatenate(run_replicas(model, init, cfg, replicas, reduce, jobs=jobs, n_init=n_scale))
    v = float(np.var(vals, ddof=1)) * n_scale
    c = vals - vals.mean()
    se_v = n_scale * math.sqrt(max(np.mean(c**4) - (v / n_scale) ** 2, 0.0) / vals.size)
    bracket = pde_solution.bracket()
    rep = make_report(f"variance_bracket[{model.name}]", v, se_v, bracket, 0.0, seed,
                      {"model": model.name, "n": n_scale, "t": t, "replicas": replicas},
                      allowance=rel_tol * abs(bracket),
                      extra={"initial_variance": pde_solution.initial_variance(),
                             "mean_X_t_f": float(vals.mean()), "pde_X_t_f": pde_solution.mean_value()})
    return rep


# ---------------------------------------------------------------------------
# large-population limit


def macroscopic_check(model: ModelSpec, density: Callable, sampler: Callable, n: int, T: float,
                      grid: "pde.Grid", seed: int, fns: Optional[dict] = None, rel_tol: float = 0.02,
                      dt: float = 0.05, max_particles: float = 1e7) -> list[CheckReport]:
    """One system of ``n`` particles, (1/n) Z_T(f), against the mean-measure PDE.

    ``density`` is the initial density handed to the PDE and ``sampler(rng, n)``
    draws the matching i.i.d. initial sizes.  The tolerance is relative
    (``rel_tol`` of the PDE value); there is a single system, so no stderr.
    """
    fns = fns or {"one": _ones, "x": lambda x: np.asarray(x, dtype=float),
                  "exp_neg": lambda x: np.exp(-np.asarray(x, dtype=float))}
    traj = pde.pde_solve(model, pde.pde_init(grid, density), T)
    final = traj.states[-1]
    x0 = sampler(np.random.default_rng(sub_seed(seed, 0)), n)
    cfg = SimConfig(T=T, dt=dt, seed=sub_seed(seed, 1), snapshot_times=[T], max_particles=max_particles)
    res = simulate(model, x0, cfg)
    out = []
    for name, f in fns.items():
        mc = float(res.functional(T, f)[0]) / n
        det = final.integrate(f)
        out.append(make_report(f"macro[{model.name},{name}]", mc, 0.0, det, 0.0, seed,
                               {"n": n, "T": T, "n_cells": grid.n_cells, "x_max": grid.x_max},
                               allowance=rel_tol * abs(det),
                               extra={"relative_error": abs(mc - det) / abs(det)}))
    return out


def tcp_profile_check(r: float, grid: "pde.Grid", t: float, x0: float = 1.0,
                      tol: float = 0.03) -> CheckReport:
    """L1 distance between the normalised PDE profile and the series density."""
    model = make_equal_mitosis(ConstantRate(r))
    traj = pde.pde_solve(model, pde.pde_init(grid, point=x0), t)
    prof = traj.states[-1].normalized()
    exact = tcp_invariant_density(grid.centers, r)
    l1 = pde.l1_distance(prof, exact, grid.dx)
    return make_report(f"tcp_profile_l1[r={r:g}]", l1, 0.0, 0.0, 0.0, 0, {"r": r, "t": t, "x0": x0,
                       "n_cells": grid.n_cells, "x_max": grid.x_max}, allowance=tol)


# ---------------------------------------------------------------------------
# branching Ornstein-Uhlenbeck


@dataclass
class OUClosedForms:
    Gamma: float
    alpha: float
    lam: float
    mean_population: float
    mean_population_quad: float
    limit_variance: float

    def limit_density(self, y) -> Array:
        """Per-coordinate density of the limit of the normalised population."""
        y = np.asarray(y, dtype=float)
        v = self.limit_variance
        return np.exp(-0.5 * y * y / v) / math.sqrt(2 * math.pi * v)

    def limit_cdf(self, y) -> Array:
        return stats.norm.cdf(y, scale=math.sqrt(self.limit_variance))


def ou_closed_forms(g: float, sigma: float, a: float, b: float, t: float, x0, d: int = 1) -> OUClosedForms:
    """Closed forms for branching OU with rate b|x|^2 + a (see module docs).

    E[N_t] = e^{lambda t + Gamma |x|^2} E[exp(-Gamma |Y_t|^2)] where the
    spine Y is an OU process dY = -alpha Y dt + sigma dW; the Gaussian
    expectation is evaluated in closed form and, independently, by
    adaptive quadrature.  The limit of the normalised population has
    density proportional to exp(-Gamma y^2) pi(y), pi = N(0, sigma^2/(2 alpha)),
    i.e. a centred Gaussian of variance sigma^2 / (g + alpha) per coordinate.
    """
    if g <= sigma * math.sqrt(2 * b):
        raise InvalidModelError("g <= sigma sqrt(2b): the spine is not ergodic")
    gam, alpha = ou_exponents(g, sigma, b)
    lam = d * sigma * sigma * gam + a
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    if x.size == 1 and d > 1:
        x = np.full(d, x.item())
    m = x * math.exp(-alpha * t)
    var = sigma**2 * -math.expm1(-2 * alpha * t) / (2 * alpha)
    pref = math.exp(lam * t + gam * float(x @ x))
    closed = pref * (1 + 2 * gam * var) ** (-d / 2) * math.exp(-gam * float(m @ m) / (1 + 2 * gam * var))
    quad = pref
    for mi in m:
        if var > 0:
            val, _ = integrate.quad(
                lambda y: math.exp(-gam * y * y - 0.5 * (y - mi) ** 2 / var) / math.sqrt(2 * math.pi * var),
                -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12)
        else:
            val = math.exp(-gam * mi * mi)
        quad *= val
    return OUClosedForms(gam, alpha, lam, closed, quad, sigma**2 / (g + alpha))


def ou_literal_limit_cdf(g: float, sigma: float, b: float) -> Callable:
    """CDF for a density proportional to exp(+Gamma y^2) pi(y) (reference only)."""
    gam, alpha = ou_exponents(g, sigma, b)
    prec = alpha / sigma**2 - gam
    if prec <= 0:
        raise ValueError("exp(+Gamma y^2) pi(y) is not integrable for these parameters")
    return lambda y: stats.norm.cdf(y, scale=math.sqrt(1.0 / (2.0 * prec)))


# ---------------------------------------------------------------------------
# non-explosion


def growth_bound(n0: float, kbar: int, rbar: float, T: float) -> float:
    """N_0 e^{(kbar - 1) rbar T}."""
    return n0 * math.exp((kbar - 1) * rbar * T)


def moment_guard_constant(p: float, c0: float) -> float:
    """C_p = p + C_0 for r(x) <= C_0 (1 + x^p) in size-structured binary division.

    Transport contributes p x^{p-1} <= p (1 + x^p); each division adds at
    most one particle and does not increase sum x^p.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    return p + c0
