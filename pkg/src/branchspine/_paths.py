"""Motion steps and Poisson thinning shared by the tree and spine simulators."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .model_zoo import ModelSpec

Array = np.ndarray


class BoundViolation(RuntimeError):
    """A model-supplied rate or envelope bound was exceeded at runtime."""


def child_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Independent stream for batch ``index`` of a run seeded with ``seed``."""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))


def _bcast(v: Array, x: Array) -> Array:
    return v if x.ndim == 1 else v[:, None]


def move(model: ModelSpec, x0: Array, tau: Array, rng: np.random.Generator,
         drift: Optional[Callable[[Array], Array]] = None) -> Array:
    """State after time ``tau`` (per item): exact flow or one Euler-Maruyama step."""
    if model.flow is not None and drift is None:
        return model.flow(x0, tau)
    b = np.asarray((drift or model.drift)(x0), dtype=float)
    x1 = x0 + b * _bcast(tau, x0)
    if not model.diffusion_is_zero:
        scale = np.sqrt(2.0 * np.maximum(model.diffusion_at(x0), 0.0) * tau)
        x1 = x1 + _bcast(scale, x0) * rng.standard_normal(x0.shape)
    return model.state_space.project(x1)


def along(model: ModelSpec, x0: Array, x1: Array, s: Array, tau: Array, exact: bool) -> Array:
    """Point at offset ``s`` on the path x0 -> x1 (flow, or linear interpolation)."""
    if exact:
        return model.flow(x0, s)
    frac = np.where(tau > 0, s / np.where(tau > 0, tau, 1.0), 0.0)
    return x0 + _bcast(frac, x0) * (x1 - x0)


def thin(rate: Callable[[Array], Array], bound: Array, tau: Array,
         locate: Callable[[Array, Array], Array], rng: np.random.Generator,
         rtol: float = 1e-9) -> tuple[Array, Array, Array]:
    """First event of an inhomogeneous Poisson clock on [0, tau] by thinning.

    ``locate(idx, s)`` returns the states of items ``idx`` at offsets ``s``.
    Returns (fired mask, event offsets, indices of fired items, states at
    the events in the order of those indices).
    """
    n = tau.shape[0]
    s = np.zeros(n)
    fired = np.zeros(n, dtype=bool)
    pending = np.flatnonzero((bound > 0) & (tau > 0))
    hit_idx = []
    hit_states = []
    while pending.size:
        with np.errstate(divide="ignore"):
            s[pending] += rng.exponential(size=pending.size) / bound[pending]
        pending = pending[s[pending] < tau[pending]]
        if not pending.size:
            break
        cand = locate(pending, s[pending])
        rr = np.asarray(rate(cand), dtype=float)
        bb = bound[pending]
        if np.any(rr > bb * (1 + rtol) + 1e-300):
            raise BoundViolation("division rate exceeded its local upper bound")
        acc = rng.random(pending.size) * bb < rr
        if np.any(acc):
            fired[pending[acc]] = True
            hit_idx.append(pending[acc])
            hit_states.append(cand[acc])
        pending = pending[~acc]
    if hit_idx:
        idx = np.concatenate(hit_idx)
        states = np.concatenate(hit_states)
        order = np.argsort(idx, kind="stable")
        return fired, s, idx[order], states[order]
    return fired, s, np.zeros(0, dtype=np.int64), None


def draw_offspring(model: ModelSpec, x: Array, rng: np.random.Generator) -> tuple[Array, Array]:
    """Offspring numbers K ~ p(x) and the shared uniform theta per parent."""
    n = x.shape[0]
    p = model.pmf(x)
    u = rng.random(n)
    k = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), model.kbar)
    theta = rng.random(n)
    return k.astype(np.int64), theta


def place_children(model: ModelSpec, x: Array, k: Array, theta: Array) -> tuple[Array, Array, Array]:
    """Children of parents at ``x``: (parent position in x, rank 1..k, state)."""
    total = int(k.sum())
    parent = np.repeat(np.arange(x.shape[0]), k)
    starts = np.cumsum(k) - k
    rank = np.arange(total) - np.repeat(starts, k) + 1
    states = np.empty((total,) + x.shape[1:])
    kk = k[parent]
    for kv in np.unique(kk):
        for j in range(1, kv + 1):
            sel = np.flatnonzero((kk == kv) & (rank == j))
            if sel.size:
                src = parent[sel]
                states[sel] = model.frag_map(int(kv), j, x[src], theta[src])
    return parent, rank, states
