"""Simulation of the branching particle system on its Ulam-Harris tree.

Two engines share one arena layout (one row per particle):

* deterministic motion (``model.flow`` set): particles are processed one
  generation at a time; lifetimes come from closed-form hazard inversion
  or from thinning along the exact flow, and snapshot states are recovered
  afterwards from the flow;
* diffusive motion: all alive particles are stepped together by
  Euler-Maruyama and divisions are found by thinning on each step.

Replicas are simulated in fixed-size batches; batch ``c`` draws from the
stream ``SeedSequence(seed, spawn_key=(c,))`` so results do not depend on
how batches are distributed over workers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ._paths import along, child_seed, draw_offspring, move, place_children, thin
from .model_zoo import ConstantRate, DomainError, ModelSpec

Array = np.ndarray

DEFAULT_BATCH_PARTICLES = 4096


class ExplosionError(RuntimeError):
    """Population exceeded ``max_particles``; ``partial`` holds the data so far."""

    def __init__(self, message: str, partial: "SimResult | None" = None):
        super().__init__(message)
        self.partial = partial


class UnsupportedCouplingError(ValueError):
    pass


@dataclass
class SimConfig:
    T: float
    dt: float = 0.01
    max_particles: int = 1_000_000
    seed: int = 0
    snapshot_times: Sequence[float] = ()

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.T < 0:
            raise ValueError("horizon must be non-negative")
        if self.max_particles < 1:
            raise ValueError("max_particles must be at least 1")
        times = [float(t) for t in self.snapshot_times] or [float(self.T)]
        if any(t < 0 or t > self.T for t in times):
            raise ValueError("snapshot times must lie in [0, T]")
        if times != sorted(times):
            raise ValueError("snapshot times must be sorted")
        self.snapshot_times = tuple(times)


@dataclass
class Particle:
    label: str
    parent: str
    birth_time: float
    death_time: float
    state_at_death: Optional[np.ndarray]
    snapshot_states: dict


@dataclass
class EmpiricalMeasure:
    """Weighted point masses; ``groups`` optionally tags samples by origin."""

    states: Array
    weights: Optional[Array] = None
    groups: Optional[Array] = None

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=float)
        if self.weights is None:
            self.weights = np.ones(self.states.shape[0])
        else:
            self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def integrate(mu: EmpiricalMeasure, f: Callable[[Array], Array]) -> float:
    """sum_i w_i f(x_i)."""
    if len(mu) == 0:
        return 0.0
    return float(np.sum(mu.weights * np.asarray(f(mu.states), dtype=float)))


@dataclass
class SimResult:
    """Arena of particles from one or more independent replicas."""

    model_name: str
    T: float
    seed: int
    n_replicas: int
    replica: Array
    parent: Array
    rank: Array
    generation: Array
    birth_time: Array
    death_time: Array
    birth_state: Array
    death_state: Array
    snapshots: dict = field(default_factory=dict)

    @property
    def n_particles(self) -> int:
        return self.replica.shape[0]

    def _snap(self, t: float) -> tuple[Array, Array]:
        for key, val in self.snapshots.items():
            if key == t or math.isclose(key, t, rel_tol=0, abs_tol=1e-12):
                return val
        raise KeyError(f"time {t} was not recorded as a snapshot")

    def snapshot(self, t: float, replica: Optional[int] = None) -> EmpiricalMeasure:
        idx, states = self._snap(t)
        if replica is not None:
            keep = self.replica[idx] == replica
            states = states[keep]
        return EmpiricalMeasure(states)

    def functional(self, t: float, f: Callable[[Array], Array]) -> Array:
        """Per-replica Z_t(f)."""
        idx, states = self._snap(t)
        vals = np.asarray(f(states), dtype=float) if idx.size else np.zeros(0)
        return np.bincount(self.replica[idx], weights=vals, minlength=self.n_replicas)

    def counts(self, t: float) -> Array:
        idx, _ = self._snap(t)
        return np.bincount(self.replica[idx], minlength=self.n_replicas)

    def dead_mask(self) -> Array:
        return self.death_time <= self.T

    def label(self, i: int) -> str:
        parts = []
        while i >= 0:
            parts.append(str(int(self.rank[i])))
            i = int(self.parent[i])
        return ".".join(reversed(parts))

    def particles(self, replica: int = 0) -> list[Particle]:
        out = []
        for i in np.flatnonzero(self.replica == replica):
            snaps = {}
            for t, (idx, st) in self.snapshots.items():
                hit = np.flatnonzero(idx == i)
                if hit.size:
                    snaps[t] = st[hit[0]]
            dead = self.death_time[i] <= self.T
            out.append(Particle(
                label=self.label(i),
                parent=self.label(int(self.parent[i])) if self.parent[i] >= 0 else "",
                birth_time=float(self.birth_time[i]),
                death_time=float(self.death_time[i]) if dead else math.inf,
                state_at_death=self.death_state[i] if dead else None,
                snapshot_states=snaps,
            ))
        return out

    def to_csv(self, path, replica: int = 0) -> None:
        """Tree dump: label,parent,alpha,beta,state (beta = inf while alive at T)."""
        d = 1 if self.birth_state.ndim == 1 else self.birth_state.shape[1]
        header = ["label", "parent", "alpha", "beta"]
        header += ["state"] if d == 1 else [f"state_{i}" for i in range(d)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for p in self.particles(replica):
                if p.state_at_death is None:
                    st = ["nan"] * d
                else:
                    st = [repr(float(v)) for v in np.atleast_1d(p.state_at_death)]
                w.writerow([p.label, p.parent, repr(p.birth_time), repr(p.death_time)] + st)


def snapshot(res: SimResult, t: float, replica: Optional[int] = None) -> EmpiricalMeasure:
    return res.snapshot(t, replica)


def dead_set(res: SimResult, replica: Optional[int] = None) -> tuple[Array, Array]:
    """(state at death, death time) for every particle with beta(u) <= T."""
    mask = res.dead_mask()
    if replica is not None:
        mask &= res.replica == replica
    return res.death_state[mask], res.death_time[mask]


# ---------------------------------------------------------------------------
# engines


class _Arena:
    def __init__(self, model: ModelSpec):
        self.model = model
        self.cols: dict[str, list[Array]] = {k: [] for k in (
            "replica", "parent", "rank", "generation", "birth_time", "birth_state")}
        self.n = 0

    def add(self, replica, parent, rank, generation, birth_time, birth_state) -> Array:
        m = replica.shape[0]
        for key, val in zip(self.cols, (replica, parent, rank, generation, birth_time, birth_state)):
            self.cols[key].append(val)
        idx = np.arange(self.n, self.n + m)
        self.n += m
        return idx

    def column(self, key: str, empty_shape=()) -> Array:
        vals = self.cols[key]
        return np.concatenate(vals) if vals else np.zeros((0,) + empty_shape)


def _roots(model: ModelSpec, init, n_replicas: int, rng: np.random.Generator) -> tuple[Array, Array]:
    if callable(init):
        per = [model.states(init(rng)) for _ in range(n_replicas)]
    else:
        x = model.states(init)
        per = [x] * n_replicas
    if any(p.shape[0] == 0 for p in per):
        raise ValueError("initial population must be non-empty")
    states = np.concatenate(per)
    replica = np.repeat(np.arange(n_replicas), [p.shape[0] for p in per])
    return states, replica


def _check_explosion(created: Array, cfg: SimConfig, build_partial: Callable[[], SimResult]) -> None:
    if created.size and created.max() > cfg.max_particles:
        raise ExplosionError(
            f"population exceeded max_particles={cfg.max_particles}", build_partial())


def _simulate_flow(model: ModelSpec, roots: Array, root_rep: Array, n_replicas: int,
                   cfg: SimConfig, rng: np.random.Generator) -> SimResult:
    T = cfg.T
    arena = _Arena(model)
    deaths_t: list[Array] = []
    deaths_x: list[Array] = []
    death_idx: list[Array] = []

    idx = arena.add(root_rep, np.full(roots.shape[0], -1), _root_ranks(root_rep),
                    np.zeros(roots.shape[0], dtype=np.int64), np.zeros(roots.shape[0]), roots)
    cur_t = np.zeros(roots.shape[0])
    cur_x = roots
    cur_rep = root_rep
    gen = 0
    created = np.bincount(root_rep, minlength=n_replicas)

    def partial():
        return _finish(model, arena, death_idx, deaths_t, deaths_x, n_replicas, cfg, flow=True)

    while idx.size:
        life = _lifetimes(model, cur_x, T - cur_t, cfg.dt, rng)
        die_t = cur_t + life
        dies = die_t <= T
        if not np.any(dies):
            break
        d_idx = idx[dies]
        d_x = model.flow(cur_x[dies], life[dies])
        d_t = die_t[dies]
        death_idx.append(d_idx)
        deaths_t.append(d_t)
        deaths_x.append(d_x)
        k, theta = draw_offspring(model, d_x, rng)
        par, rank, child_x = place_children(model, d_x, k, theta)
        gen += 1
        rep = cur_rep[dies][par]
        idx = arena.add(rep, d_idx[par], rank, np.full(par.size, gen), d_t[par], child_x)
        cur_t, cur_x, cur_rep = d_t[par], child_x, rep
        created += np.bincount(rep, minlength=n_replicas)
        _check_explosion(created, cfg, partial)
    return partial()


def _root_ranks(root_rep: Array) -> Array:
    starts = np.flatnonzero(np.r_[True, root_rep[1:] != root_rep[:-1]])
    counts = np.diff(np.r_[starts, root_rep.size])
    return np.arange(root_rep.size) - np.repeat(starts, counts) + 1


def _lifetimes(model: ModelSpec, x: Array, remaining: Array, dt: float,
               rng: np.random.Generator) -> Array:
    """Lifetimes along the exact flow; np.inf when beyond ``remaining``."""
    n = x.shape[0]
    if model.hazard_inverse is not None:
        life = np.asarray(model.hazard_inverse(x, rng.exponential(size=n)), dtype=float)
        return np.where(life <= remaining, life, np.inf)
    life = np.full(n, np.inf)
    elapsed = np.zeros(n)
    pos = x.copy()
    active = np.flatnonzero(remaining > 0)
    while active.size:
        tau = np.minimum(dt, remaining[active] - elapsed[active])
        x0 = pos[active]
        x1 = model.flow(x0, tau)
        bound = model.local_rate_bound(x0, x1)
        fired, s, hit, _ = thin(model.rate, bound, tau,
                                lambda j, off: model.flow(x0[j], off), rng)
        life[active[hit]] = elapsed[active[hit]] + s[hit]
        elapsed[active] += tau
        pos[active] = x1
        keep = ~fired & (elapsed[active] < remaining[active] - 1e-15)
        active = active[keep]
    return life


def _finish(model: ModelSpec, arena: _Arena, death_idx, deaths_t, deaths_x, n_replicas: int,
            cfg: SimConfig, flow: bool, snaps: Optional[dict] = None) -> SimResult:
    shape = () if model.dim == 1 else (model.dim,)
    birth_state = arena.column("birth_state", shape)
    n = birth_state.shape[0]
    death_time = np.full(n, np.inf)
    death_state = np.full(birth_state.shape, np.nan)
    if death_idx:
        di = np.concatenate(death_idx)
        death_time[di] = np.concatenate(deaths_t)
        death_state[di] = np.concatenate(deaths_x)
    birth_time = arena.column("birth_time")
    res = SimResult(
        model_name=model.name, T=cfg.T, seed=cfg.seed, n_replicas=n_replicas,
        replica=arena.column("replica").astype(np.int64),
        parent=arena.column("parent").astype(np.int64),
        rank=arena.column("rank").astype(np.int64),
        generation=arena.column("generation").astype(np.int64),
        birth_time=birth_time, death_time=death_time,
        birth_state=birth_state, death_state=death_state,
    )
    if flow:
        for t in cfg.snapshot_times:
            alive = np.flatnonzero((birth_time <= t) & (t < death_time))
            res.snapshots[t] = (alive, model.flow(birth_state[alive], t - birth_time[alive]))
    else:
        res.snapshots = snaps or {}
    return res


def _simulate_diffusive(model: ModelSpec, roots: Array, root_rep: Array, n_replicas: int,
                        cfg: SimConfig, rng: np.random.Generator) -> SimResult:
    T = cfg.T
    arena = _Arena(model)
    death_idx: list[Array] = []
    deaths_t: list[Array] = []
    deaths_x: list[Array] = []
    snaps: dict = {}
    grid = np.unique(np.r_[np.arange(0.0, T, cfg.dt), list(cfg.snapshot_times), T])
    snap_set = set(cfg.snapshot_times)

    idx = arena.add(root_rep, np.full(roots.shape[0], -1), _root_ranks(root_rep),
                    np.zeros(roots.shape[0], dtype=np.int64), np.zeros(roots.shape[0]), roots)
    gen_of = {}
    alive_idx, alive_x, alive_rep = idx, roots.copy(), root_rep
    alive_gen = np.zeros(idx.size, dtype=np.int64)

    def partial():
        return _finish(model, arena, death_idx, deaths_t, deaths_x, n_replicas, cfg,
                       flow=False, snaps=snaps)

    if 0.0 in snap_set:
        snaps[0.0] = (alive_idx.copy(), alive_x.copy())
    for t0, t1 in zip(grid[:-1], grid[1:]):
        # items: particles still to be carried to t1, with their start time
        it_idx, it_x, it_rep, it_gen = alive_idx, alive_x, alive_rep, alive_gen
        it_t = np.full(it_idx.size, t0)
        done_idx, done_x, done_rep, done_gen = [], [], [], []
        while it_idx.size:
            tau = t1 - it_t
            x1 = move(model, it_x, tau, rng)
            bound = model.local_rate_bound(it_x, x1)
            x0 = it_x
            fired, s, hit, hit_x = thin(
                model.rate, bound, tau,
                lambda j, off: along(model, x0[j], x1[j], off, tau[j], exact=False), rng)
            surv = ~fired
            done_idx.append(it_idx[surv])
            done_x.append(x1[surv])
            done_rep.append(it_rep[surv])
            done_gen.append(it_gen[surv])
            if not hit.size:
                break
            d_t = it_t[hit] + s[hit]
            death_idx.append(it_idx[hit])
            deaths_t.append(d_t)
            deaths_x.append(hit_x)
            k, theta = draw_offspring(model, hit_x, rng)
            par, rank, child_x = place_children(model, hit_x, k, theta)
            rep = it_rep[hit][par]
            gen = it_gen[hit][par] + 1
            new = arena.add(rep, it_idx[hit][par], rank, gen, d_t[par], child_x)
            it_idx, it_x, it_rep, it_gen, it_t = new, child_x, rep, gen, d_t[par]
        alive_idx = np.concatenate(done_idx)
        alive_x = np.concatenate(done_x)
        alive_rep = np.concatenate(done_rep)
        alive_gen = np.concatenate(done_gen)
        order = np.argsort(alive_idx, kind="stable")
        alive_idx, alive_x, alive_rep, alive_gen = (
            alive_idx[order], alive_x[order], alive_rep[order], alive_gen[order])
        _check_explosion(np.bincount(alive_rep, minlength=n_replicas), cfg, partial)
        if t1 in snap_set:
            snaps[float(t1)] = (alive_idx.copy(), alive_x.copy())
    del gen_of
    return partial()


def _simulate_batch(model: ModelSpec, init, cfg: SimConfig, n_replicas: int,
                    rng: np.random.Generator) -> SimResult:
    roots, root_rep = _roots(model, init, n_replicas, rng)
    if model.flow is not None:
        return _simulate_flow(model, roots, root_rep, n_replicas, cfg, rng)
    return _simulate_diffusive(model, roots, root_rep, n_replicas, cfg, rng)


def simulate(model: ModelSpec, init, cfg: SimConfig) -> SimResult:
    """One realisation of the branching system started from ``init``."""
    return _simulate_batch(model, init, cfg, 1, np.random.default_rng(child_seed(cfg.seed, 0)))


# ---------------------------------------------------------------------------
# replicas


def batch_size_for(init) -> int:
    """Replicas per batch; depends only on the size of the initial population."""
    n0 = 1 if callable(init) else max(1, np.asarray(init, dtype=float).reshape(-1).size)
    return max(1, DEFAULT_BATCH_PARTICLES // n0)


def _run_batch(model, init, cfg, start, count, c, reducer):
    rng = np.random.default_rng(child_seed(cfg.seed, c))
    res = _simulate_batch(model, init, cfg, count, rng)
    return reducer(res) if reducer is not None else res


def iter_batches(n_replicas: int, batch: int) -> Iterator[tuple[int, int, int]]:
    for c, start in enumerate(range(0, n_replicas, batch)):
        yield start, min(batch, n_replicas - start), c


def run_replicas(model: ModelSpec, init, cfg: SimConfig, n_replicas: int,
                 reducer: Optional[Callable[[SimResult], object]] = None,
                 jobs: int = 1, batch: Optional[int] = None, n_init: Optional[int] = None) -> list:
    """Simulate ``n_replicas`` independent replicas and reduce each batch.

    Returns the list of per-batch reducer outputs (or SimResults), in batch
    order.  ``n_init`` gives the initial population size of sampled inits so
    the batch size can be derived from it.
    """
    if batch is None:
        batch = batch_size_for(init) if n_init is None else max(1, DEFAULT_BATCH_PARTICLES // n_init)
    tasks = list(iter_batches(n_replicas, batch))
    if jobs > 1 and len(tasks) > 1:
        from joblib import Parallel, delayed

        return Parallel(n_jobs=jobs)(
            delayed(_run_batch)(model, init, cfg, s, n, c, reducer) for s, n, c in tasks)
    return [_run_batch(model, init, cfg, s, n, c, reducer) for s, n, c in tasks]


def replica_functionals(model: ModelSpec, init, cfg: SimConfig, n_replicas: int,
                        fns: dict[str, Callable[[Array], Array]], jobs: int = 1,
                        n_init: Optional[int] = None, times: Optional[Sequence[float]] = None) -> dict:
    """Per-replica Z_t(f) for every named f and snapshot time t."""
    times = tuple(times or cfg.snapshot_times)

    def reduce(res: SimResult):
        return {(name, t): res.functional(t, f) for name, f in fns.items() for t in times}

    parts = run_replicas(model, init, cfg, n_replicas, reduce, jobs=jobs, n_init=n_init)
    return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}


def merge_results(parts: list[SimResult]) -> SimResult:
    """Concatenate batch results, re-indexing parents and replicas."""
    if len(parts) == 1:
        return parts[0]
    offs = np.cumsum([0] + [p.n_particles for p in parts[:-1]])
    roffs = np.cumsum([0] + [p.n_replicas for p in parts[:-1]])
    cat = lambda key: np.concatenate([getattr(p, key) for p in parts])  # noqa: E731
    parent = np.concatenate([np.where(p.parent >= 0, p.parent + o, -1) for p, o in zip(parts, offs)])
    res = SimResult(
        model_name=parts[0].model_name, T=parts[0].T, seed=parts[0].seed,
        n_replicas=int(sum(p.n_replicas for p in parts)),
        replica=np.concatenate([p.replica + r for p, r in zip(parts, roffs)]),
        parent=parent, rank=cat("rank"), generation=cat("generation"),
        birth_time=cat("birth_time"), death_time=cat("death_time"),
        birth_state=cat("birth_state"), death_state=cat("death_state"),
    )
    for t in parts[0].snapshots:
        res.snapshots[t] = (
            np.concatenate([p.snapshots[t][0] + o for p, o in zip(parts, offs)]),
            np.concatenate([p.snapshots[t][1] for p in parts]),
        )
    return res


def simulate_replicas(model: ModelSpec, init, cfg: SimConfig, n_replicas: int,
                      jobs: int = 1) -> SimResult:
    return merge_results(run_replicas(model, init, cfg, n_replicas, None, jobs=jobs))


# ---------------------------------------------------------------------------
# parallel coupling for constant-rate equal mitosis


@dataclass
class CoupledResult:
    x_result: SimResult
    y_birth_state: Array
    displacement: dict  # t -> per-replica sum_u |X^u_t - Y^u_t|
    wasserstein: dict  # t -> per-replica W1(Z^x_t, Z^y_t)

    def y_states(self, t: float) -> tuple[Array, Array]:
        idx, _ = self.x_result._snap(t)
        r = self.x_result
        return idx, self.y_birth_state[idx] + (t - r.birth_time[idx])


def coupled_mitosis_simulate(model: ModelSpec, x: float, y: float, cfg: SimConfig,
                             n_replicas: int = 1) -> CoupledResult:
    """Two labellings of one Yule tree, started from x and from y.

    Both share every lifetime; each child starts at half its parent's size.
    """
    from .estimators import wasserstein1d

    rate = model.params.get("rate")
    if not (model.equal_halving and model.flow is not None and isinstance(rate, ConstantRate)):
        raise UnsupportedCouplingError("the coupling needs constant-rate equal mitosis")
    res = simulate_replicas(model, [x], cfg, n_replicas)
    yb = np.empty(res.n_particles)
    roots = res.parent < 0
    yb[roots] = y
    for g in range(1, int(res.generation.max(initial=0)) + 1):
        sel = np.flatnonzero(res.generation == g)
        par = res.parent[sel]
        yb[sel] = 0.5 * (yb[par] + (res.death_time[par] - res.birth_time[par]))
    out = CoupledResult(res, yb, {}, {})
    for t in cfg.snapshot_times:
        idx, xs = res._snap(t)
        ys = yb[idx] + (t - res.birth_time[idx])
        rep = res.replica[idx]
        out.displacement[t] = np.bincount(rep, weights=np.abs(xs - ys), minlength=res.n_replicas)
        w = np.zeros(res.n_replicas)
        order = np.argsort(rep, kind="stable")
        bounds = np.searchsorted(rep[order], np.arange(res.n_replicas + 1))
        for r in range(res.n_replicas):
            sl = order[bounds[r]:bounds[r + 1]]
            w[r] = wasserstein1d(xs[sl], ys[sl]) * sl.size if sl.size else 0.0
        out.wasserstein[t] = w
    return out


def sup_functional(res: SimResult, model: ModelSpec, f: Callable[[Array], Array],
                   replica: int = 0) -> float:
    """sup over [0, T] of Z_s(f) for a flow model, scanning left limits at deaths and T."""
    if model.flow is None:
        raise ValueError("sup_functional needs a deterministic flow")
    sel = np.flatnonzero(res.replica == replica)
    bt, dt, bx = res.birth_time[sel], res.death_time[sel], res.birth_state[sel]
    times = np.r_[0.0, dt[dt <= res.T], res.T]
    best = -np.inf
    for s in times:
        alive = (bt < s) & (s <= dt) if s > 0 else (bt == 0)
        if s == res.T:
            alive = (bt <= s) & (s < dt) | ((bt < s) & (dt == s))
        val = float(np.sum(f(model.flow(bx[alive], s - bt[alive])))) if np.any(alive) else 0.0
        best = max(best, val)
    return best
