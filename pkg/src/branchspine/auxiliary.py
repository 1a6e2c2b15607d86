"""The V-weighted auxiliary (spine) process Y with generator A = M + J.

Between jumps Y follows the motion with drift b + 2 sigma grad V / V (the
quotient (G(fV) - f GV) / V under Gf = b.grad f + sigma Lap f).  Jumps
happen at rate

    Lambda(x) = r(x) sum_k p_k(x) sum_{j<=k} int V(F_j^(k)(x, theta)) dtheta / V(x)

and land at F_j^(k)(x, theta) with (k, j, theta) weighted by p_k V(F).

Jump times and jump targets are drawn together by thinning: proposals come
at rate kbar * ratio_bound * r_bar along the path; each proposal draws
k ~ p, j uniform on 1..kbar and theta uniform, and is accepted with
probability 1{j <= k} r(y) V(F) / (r_bar ratio_bound V(y)).  The accepted
events have exactly the intensity Lambda and the V-weighted jump law, so no
quadrature is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._paths import BoundViolation, along, child_seed, move
from .branching_sim import EmpiricalMeasure
from .model_zoo import DomainError, EigenPair, ModelSpec, SmoothFn, _grad, branch_average

Array = np.ndarray


class JumpCapExceeded(RuntimeError):
    pass


def _V(eig: EigenPair, x: Array) -> Array:
    v = np.asarray(eig.V(x), dtype=float)
    if np.any(~(v > 0)):
        raise DomainError("eigenfunction vanishes or is negative at a queried state")
    return v


def aux_jump_rate(model: ModelSpec, eig: EigenPair, x, order: int = 64) -> Array:
    """Lambda(x) by theta quadrature (exact for theta-independent maps)."""
    x = model.states(x)
    v = _V(eig, x)
    return model.rate(x) * branch_average(model, eig.V, x, order) / v


def aux_drift(model: ModelSpec, eig: EigenPair, x) -> Array:
    """b(x) + 2 sigma(x) grad V(x) / V(x)."""
    x = model.states(x)
    b = np.asarray(model.drift(x), dtype=float)
    if model.diffusion_is_zero:
        return b
    v = _V(eig, x)
    gv = _grad(SmoothFn(eig.V, eig.grad_V, eig.lap_V), x)
    coef = 2.0 * model.diffusion_at(x) / v
    return b + (coef * gv if x.ndim == 1 else coef[:, None] * gv)


def _frag_many(model: ModelSpec, k: Array, j: Array, x: Array, theta: Array) -> Array:
    out = np.array(x, dtype=float, copy=True)
    for kv in np.unique(k):
        for jv in np.unique(j[k == kv]):
            sel = np.flatnonzero((k == kv) & (j == jv))
            out[sel] = model.frag_map(int(kv), int(jv), x[sel], theta[sel])
    return out


def _propose(model: ModelSpec, eig: EigenPair, y: Array, rng: np.random.Generator,
             tol: float = 1e-9) -> tuple[Array, Array]:
    """One base-law proposal (k ~ p, j ~ U{1..kbar}, theta ~ U) per state.

    Returns (target states, V-acceptance probability; 0 where j > k).
    """
    n = y.shape[0]
    p = model.pmf(y)
    k = np.minimum((np.cumsum(p, axis=1) < rng.random(n)[:, None]).sum(axis=1), model.kbar)
    j = rng.integers(1, model.kbar + 1, size=n)
    theta = rng.random(n)
    ok = (j <= k) & (k >= 1)
    F = np.array(y, dtype=float, copy=True)
    if np.any(ok):
        F[ok] = _frag_many(model, k[ok], j[ok], y[ok], theta[ok])
    prob = np.zeros(n)
    if np.any(ok):
        ratio = _V(eig, F[ok]) / (eig.ratio_bound * _V(eig, y[ok]))
        if np.any(ratio > 1 + tol):
            raise BoundViolation("V(F(x)) / V(x) exceeded the eigenpair's ratio_bound")
        prob[ok] = ratio
    return F, prob


def aux_jump_sample(model: ModelSpec, eig: EigenPair, x, rng: np.random.Generator,
                    max_rounds: int = 10_000) -> Array:
    """Post-jump states from the V-weighted jump law, by rejection."""
    x = model.states(x)
    out = np.array(x, dtype=float, copy=True)
    pending = np.arange(x.shape[0])
    for _ in range(max_rounds):
        if not pending.size:
            return out
        F, prob = _propose(model, eig, x[pending], rng)
        acc = rng.random(pending.size) < prob
        out[pending[acc]] = F[acc]
        pending = pending[~acc]
    raise RuntimeError("jump-law rejection sampler did not terminate")


def _advance(model: ModelSpec, eig: EigenPair, x: Array, t: Array, t_end: float, dt: float,
             rng: np.random.Generator, jumps: Array, jump_cap: int) -> None:
    """Advance every path (in place) from its time t to t_end."""
    exact = model.flow is not None
    drift = None if exact else (lambda z: aux_drift(model, eig, z))
    scale = model.kbar * eig.ratio_bound
    active = np.flatnonzero(t < t_end)
    while active.size:
        remaining = t_end - t[active]
        tau = np.minimum(dt, remaining)
        x0 = x[active]
        x1 = move(model, x0, tau, rng, drift=drift)
        rbar = model.local_rate_bound(x0, x1)
        bound = scale * rbar
        s = np.zeros(active.size)
        jumped = np.zeros(active.size, dtype=bool)
        target = x1.copy()
        pending = np.flatnonzero((bound > 0) & (tau > 0))
        while pending.size:
            with np.errstate(divide="ignore"):
                s[pending] += rng.exponential(size=pending.size) / bound[pending]
            pending = pending[s[pending] < tau[pending]]
            if not pending.size:
                break
            y = along(model, x0[pending], x1[pending], s[pending], tau[pending], exact)
            ry = np.asarray(model.rate(y), dtype=float)
            if np.any(ry > rbar[pending] * (1 + 1e-9) + 1e-300):
                raise BoundViolation("division rate exceeded its local upper bound")
            F, prob = _propose(model, eig, y, rng)
            acc = rng.random(pending.size) * rbar[pending] < ry * prob
            hit = pending[acc]
            jumped[hit] = True
            target[hit] = F[acc]
            pending = pending[~acc]
        x[active] = target
        step = np.where(jumped, s, tau)
        t[active] = np.where(~jumped & (tau >= remaining), t_end, t[active] + step)
        jumps[active] += jumped
        if np.any(jumps[active] > jump_cap):
            raise JumpCapExceeded(f"auxiliary path exceeded {jump_cap} jumps")
        active = active[t[active] < t_end]


def simulate_aux_batch(model: ModelSpec, eig: EigenPair, x0, record_times: Sequence[float],
                       dt: float, rng: np.random.Generator, n: Optional[int] = None,
                       jump_cap: int = 1_000_000) -> tuple[Array, Array]:
    """Many independent paths; returns (states at record times, jump counts).

    ``x0`` is one state (replicated ``n`` times) or an array of starts.
    States come back with shape (n, len(record_times)) (plus d for d > 1).
    """
    x = model.states(x0)
    if n is not None:
        if x.shape[0] != 1:
            raise ValueError("n is only meaningful with a single start state")
        x = np.repeat(x, n, axis=0)
    x = x.copy()
    times = [float(s) for s in record_times]
    if times != sorted(times) or (times and times[0] < 0):
        raise ValueError("record times must be sorted and non-negative")
    out = np.empty((x.shape[0], len(times)) + x.shape[1:])
    t = np.zeros(x.shape[0])
    jumps = np.zeros(x.shape[0], dtype=np.int64)
    for i, te in enumerate(times):
        _advance(model, eig, x, t, te, dt, rng, jumps, jump_cap)
        out[:, i] = x
    return out, jumps


@dataclass
class AuxPath:
    times: Array
    states: Array
    jumps: int
    seed: int


def simulate_aux(model: ModelSpec, eig: EigenPair, x0, T: float, dt: float, seed: int,
                 record_times: Optional[Sequence[float]] = None,
                 jump_cap: int = 1_000_000) -> AuxPath:
    """One auxiliary path recorded on a grid (default: multiples of dt up to T)."""
    if record_times is None:
        record_times = np.unique(np.r_[np.arange(0.0, T, dt), T])
    rng = np.random.default_rng(child_seed(seed, 0))
    st, jumps = simulate_aux_batch(model, eig, x0, record_times, dt, rng, jump_cap=jump_cap)
    return AuxPath(np.asarray(record_times, dtype=float), st[0], int(jumps[0]), seed)


def aux_expectations(model: ModelSpec, eig: EigenPair, x0, times: Sequence[float], n: int,
                     fns: dict, dt: float, seed: int, batch: int = 20_000) -> dict:
    """Per-path values f(Y_t) for each named f and time t, in fixed-size batches.

    Returns {name: array of shape (n, len(times))}.
    """
    parts: dict = {k: [] for k in fns}
    for c, start in enumerate(range(0, n, batch)):
        m = min(batch, n - start)
        rng = np.random.default_rng(child_seed(seed, c))
        st, _ = simulate_aux_batch(model, eig, x0, times, dt, rng, n=m)
        for name, f in fns.items():
            vals = np.stack([np.asarray(f(st[:, i]), dtype=float) for i in range(len(times))], axis=1)
            parts[name].append(vals)
    return {k: np.concatenate(v) for k, v in parts.items()}


def relaxation_rate(model: ModelSpec, eig: EigenPair) -> float:
    """Heuristic spectral-gap scale of Y, used for default burn-in.

    Size-structured models relax at the division rate near the typical
    size; the OU spine relaxes at its drift rate alpha.
    """
    if model.name == "branching_ou":
        p = model.params
        return math.sqrt(p["g"] ** 2 - 2 * p["b"] * p["sigma"] ** 2)
    x = model.states([1.0] if model.dim == 1 else [np.ones(model.dim)], check=False)
    lam = float(aux_jump_rate(model, eig, x)[0])
    return max(lam / 2.0, 1e-3)


def default_burn_in(model: ModelSpec, eig: EigenPair) -> float:
    return 10.0 / relaxation_rate(model, eig)


def long_run_distribution(model: ModelSpec, eig: EigenPair, x0, burn_in: Optional[float],
                          n_samples: int, thinning_interval: float, seed: int,
                          n_chains: Optional[int] = None, dt: float = 0.01) -> EmpiricalMeasure:
    """Post-burn-in samples of Y from parallel chains, thinned in time.

    Each chain contributes ``ceil(n_samples / n_chains)`` samples spaced by
    ``thinning_interval``; the surplus is trimmed so exactly ``n_samples``
    points are returned.  ``groups`` holds the chain index of each sample.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    if burn_in is None:
        burn_in = default_burn_in(model, eig)
    if burn_in < 0 or thinning_interval <= 0:
        raise ValueError("burn_in must be >= 0 and thinning_interval > 0")
    n_chains = n_chains or min(n_samples, 1000)
    per = -(-n_samples // n_chains)
    times = burn_in + thinning_interval * np.arange(per)
    rng = np.random.default_rng(child_seed(seed, 0))
    st, _ = simulate_aux_batch(model, eig, x0, times, dt, rng, n=n_chains)
    # sample-major order so trimming removes whole late rows evenly
    states = np.swapaxes(st, 0, 1).reshape((-1,) + st.shape[2:])[:n_samples]
    groups = np.tile(np.arange(n_chains), per)[:n_samples]
    return EmpiricalMeasure(states, groups=groups)
