"""Finite-volume solver for the 1-D growth-fragmentation (mean measure) equation.

    d/dt n + d/dx (b n) + r n = d^2/dx^2 (sigma n) + (division source)

on [0, x_max] with first-order upwind transport, centred diffusion and
explicit time steps (Heun's SSP-RK2 by default).  Division sources are either the exact halving map
(a parent in cell i has both children in cell i // 2) or a kernel matrix
built from the fraction CDFs of each child: a parent at y puts mass
G(e_{i+1} / y) - G(e_i / y) into cell [e_i, e_{i+1}).

The same module discretises the test-function side, i.e. the mean
generator itself (forward differences, linear interpolation for the
children), for power iteration and for the backward semigroup T_t f.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, sparse

from .model_zoo import (DEFAULT_THETA_ORDER, EigenPair, InvalidModelError, ModelSpec,
                        eigen_residual, gauss_legendre01)

Array = np.ndarray
CFL = 0.9
DT_ACCURACY = 0.01  # default step cap when the CFL bound alone is loose
DONOR_NODES = 4


class CFLError(ValueError):
    def __init__(self, dt: float, dt_max: float):
        super().__init__(f"time step {dt:g} violates the stability bound; use dt <= {dt_max:g}")
        self.dt_max = dt_max


class PowerIterationError(RuntimeError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class Grid:
    x_max: float
    n_cells: int

    def __post_init__(self) -> None:
        if self.n_cells < 16:
            raise ValueError("n_cells must be at least 16")
        if self.x_max <= 0:
            raise ValueError("x_max must be positive")

    @property
    def dx(self) -> float:
        return self.x_max / self.n_cells

    @property
    def edges(self) -> Array:
        return np.linspace(0.0, self.x_max, self.n_cells + 1)

    @property
    def centers(self) -> Array:
        return (np.arange(self.n_cells) + 0.5) * self.dx


@dataclass
class GridDensity:
    t: float
    values: Array
    grid: Grid
    clipped_mass: float = 0.0
    tail_mass: float = 0.0
    outflow: float = 0.0

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.dx)

    def integrate(self, f: Callable[[Array], Array]) -> float:
        """Midpoint rule for int f n dx."""
        return float(np.sum(np.asarray(f(self.grid.centers), dtype=float) * self.values) * self.grid.dx)

    def normalized(self) -> Array:
        return self.values / self.mass()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("x_center,value\n")
            for x, v in zip(self.grid.centers, self.values):
                fh.write(f"{float(x)!r},{float(v)!r}\n")


def pde_init(grid: Grid, density: Optional[Callable[[Array], Array]] = None, *,
             point: Optional[float] = None, mass: float = 1.0) -> GridDensity:
    """Cell averages of an initial density, or a point mass at ``point``.

    A density is evaluated at cell midpoints and rescaled to ``mass``;
    ``tail_mass`` records the relative mass it has beyond x_max.
    """
    n = np.zeros(grid.n_cells)
    if point is not None:
        if not 0 <= point < grid.x_max:
            raise ValueError("point mass outside the grid")
        n[min(int(point / grid.dx), grid.n_cells - 1)] = mass / grid.dx
        return GridDensity(0.0, n, grid)
    if density is None:
        raise ValueError("give a density or a point")
    vals = np.asarray(density(grid.centers), dtype=float)
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise ValueError("initial density must be finite and non-negative")
    inside, _ = integrate.quad(density, 0.0, grid.x_max, limit=200)
    tail, _ = integrate.quad(density, grid.x_max, np.inf, limit=200)
    total = vals.sum() * grid.dx
    if total <= 0:
        raise ValueError("initial density has no mass on the grid")
    return GridDensity(0.0, vals * (mass / total), grid, tail_mass=float(tail / (inside + tail)))


# ---------------------------------------------------------------------------
# operators


def _cell_rate(model: ModelSpec, grid: Grid) -> tuple[Array, Array, Array]:
    """Donor nodes (n, q), their weights (q,) and the cell-averaged rate."""
    gx, gw = gauss_legendre01(DONOR_NODES)
    nodes = grid.edges[:-1, None] + grid.dx * gx[None, :]
    r_nodes = np.asarray(model.rate(nodes.reshape(-1)), dtype=float).reshape(nodes.shape)
    return nodes, gw, r_nodes @ gw


def _check_size_structured(model: ModelSpec) -> None:
    if model.dim != 1 or not model.size_structured:
        raise InvalidModelError("the PDE solver handles 1-D size-structured models only")
    if not model.equal_halving and not model.fraction_cdfs:
        raise InvalidModelError("division maps must be monotone fractions with known CDFs")


def division_kernel(model: ModelSpec, grid: Grid) -> Array:
    """Dense K with K[i, j] = rate at which a unit density in cell j feeds cell i."""
    nodes, gw, _ = _cell_rate(model, grid)
    y = nodes.reshape(-1)
    r = np.asarray(model.rate(y), dtype=float)
    p = model.pmf(y)
    ratio = grid.edges[:, None] / y[None, :]
    K = np.zeros((grid.n_cells, y.size))
    for (k, j), G in model.fraction_cdfs.items():
        if not np.any(p[:, k] > 0):
            continue
        cdf = np.asarray(G(ratio), dtype=float)
        K += np.diff(cdf, axis=0) * (p[:, k] * r)[None, :]
    K = K.reshape(grid.n_cells, grid.n_cells, gw.size) @ gw
    return K


def halving_source(grid: Grid) -> sparse.csr_matrix:
    """Both children of a parent in cell i sit in cell i // 2: source 2 n_i per unit rate."""
    n = grid.n_cells
    cols = np.arange(n)
    return sparse.csr_matrix((np.full(n, 2.0), (cols // 2, cols)), shape=(n, n))


@dataclass
class ForwardOperator:
    grid: Grid
    L: sparse.csr_matrix
    dt_max: float
    outflow: Array  # per-cell outflow rate through x_max


_FORWARD_CACHE: dict = {}


def forward_operator(model: ModelSpec, grid: Grid) -> ForwardOperator:
    """Assembled operator, cached per (model object, grid)."""
    key = (id(model), grid)
    hit = _FORWARD_CACHE.get(key)
    if hit is None or hit[0] is not model:
        if len(_FORWARD_CACHE) > 16:
            _FORWARD_CACHE.clear()
        hit = (model, _build_forward(model, grid))
        _FORWARD_CACHE[key] = hit
    return hit[1]


def _build_forward(model: ModelSpec, grid: Grid) -> ForwardOperator:
    _check_size_structured(model)
    n, dx = grid.n_cells, grid.dx
    edges, xc = grid.edges, grid.centers
    b = np.asarray(model.drift(edges), dtype=float)
    bp, bm = np.maximum(b, 0.0), np.minimum(b, 0.0)
    # flux through edge e: bp[e] n[e-1] + bm[e] n[e]; nothing enters from outside
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    i = np.arange(n)
    # right edge of cell i (edge i+1)
    add(i, i, -bp[i + 1] / dx)
    add(i[:-1], i[:-1] + 1, -bm[i[:-1] + 1] / dx)
    # left edge of cell i (edge i)
    add(i[1:], i[1:] - 1, bp[i[1:]] / dx)
    add(i[1:], i[1:], bm[i[1:]] / dx)
    add(np.array([0]), np.array([0]), np.array([bm[0] / dx]))
    sig_max = 0.0
    if not model.diffusion_is_zero:
        sig = model.diffusion_at(xc)
        sig_max = float(sig.max())
        # d/dx J with J_{i+1/2} = (sig_{i+1} n_{i+1} - sig_i n_i) / dx, zero flux at both ends
        add(i[:-1], i[:-1] + 1, sig[i[:-1] + 1] / dx**2)
        add(i[:-1], i[:-1], -sig[i[:-1]] / dx**2)
        add(i[1:], i[1:] - 1, sig[i[1:] - 1] / dx**2)
        add(i[1:], i[1:], -sig[i[1:]] / dx**2)
    _, _, rbar = _cell_rate(model, grid)
    add(i, i, -rbar)
    L = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
    if model.equal_halving:
        L = L + halving_source(grid) @ sparse.diags(rbar)
    else:
        K = division_kernel(model, grid)
        L = L + sparse.csr_matrix(np.where(np.abs(K) > 0, K, 0.0))
    L = L.tocsr()
    denom = float(np.max(np.abs(b)) / dx + rbar.max() + 2.0 * sig_max / dx**2)
    out = np.zeros(n)
    out[-1] = bp[-1]
    return ForwardOperator(grid, L, CFL / denom if denom > 0 else math.inf, out)


def pde_step(model: ModelSpec, state: GridDensity, dt: float,
             op: Optional[ForwardOperator] = None, method: str = "rk2") -> GridDensity:
    """One step of explicit Euler or of Heun's SSP-RK2 (the default).

    Both are positivity preserving under the stability bound; a larger dt
    raises CFLError carrying the admissible value.
    """
    op = op or forward_operator(model, state.grid)
    if dt > op.dt_max * (1 + 1e-12):
        raise CFLError(dt, op.dt_max)
    n = state.values
    n1 = n + dt * (op.L @ n)
    outflow = float(dt * np.dot(op.outflow, n))
    if method == "rk2":
        new = 0.5 * n + 0.5 * (n1 + dt * (op.L @ n1))
        outflow = 0.5 * outflow + 0.5 * float(dt * np.dot(op.outflow, n1))
    elif method == "euler":
        new = n1
    else:
        raise ValueError(f"unknown method {method!r}")
    scale = max(1.0, float(np.abs(n).max()))
    if np.any(new < -1e-12 * scale):
        raise FloatingPointError("PDE step produced negative cells beyond round-off")
    neg = new < 0
    clipped = float(-new[neg].sum() * state.grid.dx) if np.any(neg) else 0.0
    new[neg] = 0.0
    return GridDensity(state.t + dt, new, state.grid, state.clipped_mass + clipped,
                       state.tail_mass, state.outflow + outflow)


@dataclass
class Trajectory:
    times: Array
    states: list

    def at(self, t: float) -> GridDensity:
        i = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[i], t, rel_tol=1e-12, abs_tol=1e-12):
            raise KeyError(f"time {t} not stored")
        return self.states[i]


def pde_solve(model: ModelSpec, init: GridDensity, T: float, dt: Optional[float] = None,
              times: Optional[Sequence[float]] = None, method: str = "rk2") -> Trajectory:
    """Time stepping up to T, landing exactly on every requested time."""
    op = forward_operator(model, init.grid)
    dt = dt if dt is not None else min(op.dt_max, DT_ACCURACY)
    if dt > op.dt_max * (1 + 1e-12):
        raise CFLError(dt, op.dt_max)
    targets = sorted(set([float(t) for t in (times if times is not None else [])] + [float(T)]))
    state = init
    out_t, out_s = [], []
    if targets and targets[0] == 0.0:
        out_t.append(0.0)
        out_s.append(init)
        targets = targets[1:]
    for tgt in targets:
        while state.t < tgt - 1e-14:
            h = min(dt, tgt - state.t)
            state = pde_step(model, state, h, op, method)
        state.t = tgt
        out_t.append(tgt)
        out_s.append(state)
    return Trajectory(np.array(out_t), out_s)


def l1_distance(a: Array, b: Array, dx: float) -> float:
    return float(np.sum(np.abs(a - b)) * dx)


def coarsen(values: Array, factor: int) -> Array:
    return values.reshape(-1, factor).mean(axis=1)


def refinement_study(model: ModelSpec, density: Callable, T: float, x_max: float,
                     n_cells: Sequence[int]) -> dict:
    """L1 self-distances between successive refinements and their ratios.

    Each level uses dt proportional to dx (the stability bound), so both
    space and time errors halve with the grid.
    """
    sols = []
    for n in n_cells:
        g = Grid(x_max, n)
        dt = forward_operator(model, g).dt_max
        sols.append(pde_solve(model, pde_init(g, density), T, dt=dt).states[-1])
    dists = []
    for coarse, fine in zip(sols[:-1], sols[1:]):
        f = fine.grid.n_cells // coarse.grid.n_cells
        dists.append(l1_distance(coarse.values, coarsen(fine.values, f), coarse.grid.dx))
    ratios = [d0 / d1 for d0, d1 in zip(dists[:-1], dists[1:])]
    return {"n_cells": list(n_cells), "distances": dists, "ratios": ratios}


# ---------------------------------------------------------------------------
# kernel identities


def _partial_mean(G: Callable, c: Array, order: int = 64) -> Array:
    """E[q; q <= c] = c G(c) - int_0^c G(u) du, for fractions q in [0, 1]."""
    c = np.clip(np.asarray(c, dtype=float), 0.0, 1.0)
    gx, gw = gauss_legendre01(order)
    u = c[..., None] * gx
    return c * np.asarray(G(c), dtype=float) - c * (np.asarray(G(u), dtype=float) @ gw)


def kernel_properties(model: ModelSpec, grid: Grid, donors: Sequence[float]) -> dict:
    """Discrete (b1)-(b2) identities of the fraction kernel at donor sizes y.

    For each y the child mass in every cell is G(e_{i+1}/y) - G(e_i/y) and
    the child size in it is y times the matching increment of the partial
    mean.  Reports the worst relative errors of: total rate 2 r(y), total
    size y r(y), non-negativity, and mirror symmetry x -> y - x (donors
    must sit on cell edges for the last one).
    """
    _check_size_structured(model)
    if not model.fraction_cdfs:
        raise InvalidModelError("kernel identities need fraction CDFs")
    e = grid.edges
    worst = {"mass": 0.0, "first_moment": 0.0, "negativity": 0.0, "symmetry": 0.0}
    for y in donors:
        y = float(y)
        ry = float(np.asarray(model.rate(np.array([y])))[0])
        p = model.pmf(np.array([y]))[0]
        mass = np.zeros(grid.n_cells)
        size = np.zeros(grid.n_cells)
        for (k, j), G in model.fraction_cdfs.items():
            mass += p[k] * np.diff(np.asarray(G(e / y), dtype=float))
            size += p[k] * y * np.diff(_partial_mean(G, e / y))
        mbar = float(np.asarray(model.mean_offspring([y]))[0])
        b = ry * mass  # b(x, y) dx integrated over each cell
        worst["mass"] = max(worst["mass"], abs(b.sum() - mbar * ry) / (mbar * ry))
        worst["first_moment"] = max(worst["first_moment"], abs(ry * size.sum() - y * ry) / (y * ry))
        worst["negativity"] = max(worst["negativity"], float(max(0.0, -b.min())) / ry)
        J = int(round(y / grid.dx))
        if math.isclose(J * grid.dx, y, rel_tol=1e-12) and J <= grid.n_cells:
            part = b[:J]
            worst["symmetry"] = max(worst["symmetry"], float(np.max(np.abs(part - part[::-1]))) / ry)
    return worst


def kernel_matrix_properties(model: ModelSpec, grid: Grid) -> dict:
    """Column sums of the assembled division kernel against m(y) r(y) per donor cell."""
    _, _, rbar = _cell_rate(model, grid)
    K = division_kernel(model, grid)
    mbar = np.asarray(model.mean_offspring(grid.centers))
    col = K.sum(axis=0)
    # donors whose children can leave the grid are excluded (none for fractions <= 1)
    rel = np.abs(col - mbar * rbar) / np.maximum(mbar * rbar, 1e-300)
    return {"mass": float(rel.max()), "negativity": float(max(0.0, -K.min()))}


# ---------------------------------------------------------------------------
# test-function side: the mean generator on the grid


def _interp_matrix(grid: Grid, x: Array) -> sparse.csr_matrix:
    """Rows of linear-interpolation weights from cell-centre values to points x."""
    xc = grid.centers
    pos = (np.asarray(x, dtype=float) - xc[0]) / grid.dx
    pos = np.clip(pos, 0.0, grid.n_cells - 1.0)
    i0 = np.minimum(np.floor(pos).astype(np.int64), grid.n_cells - 2)
    w1 = pos - i0
    rows = np.repeat(np.arange(x.size), 2)
    cols = np.stack([i0, i0 + 1], axis=1).reshape(-1)
    vals = np.stack([1.0 - w1, w1], axis=1).reshape(-1)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(x.size, grid.n_cells))


def _branch_matrix(model: ModelSpec, grid: Grid, order: int) -> sparse.csr_matrix:
    """B with (B v)_i = sum_k p_k int sum_j v(F_j(x_i, theta)) dtheta (interpolated)."""
    xc = grid.centers
    p = model.pmf(xc)
    B = sparse.csr_matrix((grid.n_cells, grid.n_cells))
    for k in model.active_arities(xc):
        nodes, weights = model.theta_nodes(k, order)
        for th, w in zip(nodes, weights):
            theta = np.full(xc.size, th)
            for j in range(1, k + 1):
                B = B + sparse.diags(w * p[:, k]) @ _interp_matrix(grid, model.frag_map(k, j, xc, theta))
    return B.tocsr()


@dataclass
class AdjointOperator:
    grid: Grid
    A: sparse.csr_matrix
    B: sparse.csr_matrix
    rate: Array
    tau_max: float


def adjoint_operator(model: ModelSpec, grid: Grid, order: int = DEFAULT_THETA_ORDER) -> AdjointOperator:
    """Grid version of the mean generator acting on values at cell centres.

    Forward differences for b >= 0 (backward for b < 0); the last cell uses
    a linearly extrapolated ghost value, the first a reflected one.
    """
    _check_size_structured(model)
    n, dx, xc = grid.n_cells, grid.dx, grid.centers
    b = np.asarray(model.drift(xc), dtype=float)
    # forward difference (v_{i+1} - v_i) / dx, ghost v_n = 2 v_{n-1} - v_{n-2}
    fw = sparse.diags([-np.ones(n), np.ones(n - 1)], [0, 1], shape=(n, n)).tolil()
    fw[n - 1, n - 1], fw[n - 1, n - 2] = 1.0, -1.0
    bw = sparse.diags([np.ones(n), -np.ones(n - 1)], [0, -1], shape=(n, n)).tolil()
    bw[0, 0], bw[0, 1] = -1.0, 1.0
    D = (sparse.diags(np.maximum(b, 0.0)) @ fw.tocsr() + sparse.diags(np.minimum(b, 0.0)) @ bw.tocsr()) / dx
    A = D
    sig_max = 0.0
    if not model.diffusion_is_zero:
        sig = model.diffusion_at(xc)
        sig_max = float(sig.max())
        lap = sparse.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], shape=(n, n)).tolil()
        lap[0, 0] = -1.0  # reflected ghost at 0
        lap[n - 1, n - 1], lap[n - 1, n - 2] = 0.0, 0.0  # linear extrapolation at x_max
        A = A + sparse.diags(sig) @ lap.tocsr() / dx**2
    r = np.asarray(model.rate(xc), dtype=float)
    B = _branch_matrix(model, grid, order)
    A = (A + sparse.diags(r) @ (B - sparse.identity(n))).tocsr()
    denom = float(np.max(np.abs(b)) / dx + r.max() + 2 * sig_max / dx**2)
    return AdjointOperator(grid, A, B, r, CFL / denom)


def tabulated_eigenpair(grid: Grid, v: Array, lam: float, name: str = "numeric") -> EigenPair:
    xc = grid.centers
    slope = np.gradient(v, grid.dx)

    def V(x):
        x = np.asarray(x, dtype=float)
        out = np.interp(x, xc, v)
        hi = x > xc[-1]
        if np.any(hi):
            out[hi] = v[-1] + slope[-1] * (x[hi] - xc[-1])
        return out

    def grad(x):
        return np.interp(np.asarray(x, dtype=float), xc, slope)

    return EigenPair(V=V, grad_V=grad, lambda0=float(lam), name=name)


def pde_power_iteration(model: ModelSpec, grid: Grid, tol: float = 1e-10, max_iters: int = 200_000,
                        order: int = DEFAULT_THETA_ORDER, residual_grid: Optional[Array] = None) -> EigenPair:
    """Dominant eigenpair of the discretised mean generator.

    Iterates v <- (I + tau A) v / max, i.e. power iteration on a shifted
    operator whose dominant eigenvector is that of A.  Stops when the
    sup-norm change of the normalised iterate falls below ``tol``.  V is
    normalised to V(0) = 1 and interpolated linearly between cell centres.
    """
    op = adjoint_operator(model, grid, order)
    tau = op.tau_max
    M = (sparse.identity(grid.n_cells) + tau * op.A).tocsr()
    v = np.ones(grid.n_cells)
    trace = []
    growth = 1.0
    for it in range(1, max_iters + 1):
        w = M @ v
        growth = float(np.max(np.abs(w)))
        w /= growth
        delta = float(np.max(np.abs(w - v)))
        v = w
        if it % 1000 == 0:
            trace.append((it, delta))
        if delta < tol:
            break
    else:
        raise PowerIterationError(f"power iteration did not converge in {max_iters} iterations", trace)
    if np.any(v < 0):
        raise PowerIterationError("dominant eigenvector is not positive", trace)
    lam = (growth - 1.0) / tau
    v = v / np.interp(0.0, grid.centers, v)
    eig = tabulated_eigenpair(grid, v, lam, name=f"numeric[{model.name}]")
    # V-ratio envelope for the spine's jump sampler
    eig.ratio_bound = max(1.0, float(np.max(_max_child_ratio(model, grid, v, order)))) * (1 + 1e-9)
    if residual_grid is None:
        residual_grid = np.linspace(0.0, grid.x_max / 4, 201)
    eig.residual = eigen_residual(model, eig, residual_grid, order)
    return eig


def _max_child_ratio(model: ModelSpec, grid: Grid, v: Array, order: int) -> Array:
    xc = grid.centers
    out = np.zeros(xc.size)
    for k in model.active_arities(xc):
        nodes, _ = model.theta_nodes(k, order)
        for th in nodes:
            theta = np.full(xc.size, th)
            for j in range(1, k + 1):
                out = np.maximum(out, np.interp(model.frag_map(k, j, xc, theta), xc, v) / v)
    return out


def growth_exponent(eig: EigenPair, x_lo: float, x_hi: float, n: int = 64) -> float:
    """Slope of log V against log x on [x_lo, x_hi]."""
    x = np.geomspace(x_lo, x_hi, n)
    return float(np.polyfit(np.log(x), np.log(eig.V(x)), 1)[0])


def plateau_exponent_relation(lam: float, r_inf: float) -> float:
    """k solving 2^k = 2 r_inf / (lambda0 + r_inf)."""
    return math.log2(2 * r_inf / (lam + r_inf))


# ---------------------------------------------------------------------------
# backward semigroup and the predictable bracket


def backward_test_functions(model: ModelSpec, grid: Grid, f: Callable, t: float,
                            times: Sequence[float], order: int = DEFAULT_THETA_ORDER,
                            dt: Optional[float] = None) -> dict:
    """f_s = T_{t - s} f on the grid for every s in ``times`` (0 <= s <= t)."""
    op = adjoint_operator(model, grid, order)
    dt = dt or op.tau_max
    lags = sorted(set(float(t - s) for s in times))
    w = np.asarray(f(grid.centers), dtype=float).copy()
    u = 0.0
    out = {}
    for lag in lags:
        while u < lag - 1e-14:
            h = min(dt, lag - u)
            w = w + h * (op.A @ w)
            u += h
        out[round(t - lag, 12)] = w.copy()
    return out


@dataclass
class BracketSolution:
    """Forward mean measure and backward test functions on shared time nodes."""

    model: ModelSpec
    grid: Grid
    t: float
    times: Array
    densities: list
    test_functions: list
    order: int = DEFAULT_THETA_ORDER
    _gamma: Optional[Array] = field(default=None, repr=False)

    def carre_du_champ(self, w: Array) -> Array:
        """2 sigma |w'|^2 + r sum_k p_k int (sum_j w(F_j) - w)^2 dtheta at cell centres."""
        xc = self.grid.centers
        model = self.model
        out = np.zeros(xc.size)
        if not model.diffusion_is_zero:
            out += 2 * model.diffusion_at(xc) * np.gradient(w, self.grid.dx) ** 2
        p = model.pmf(xc)
        r = np.asarray(model.rate(xc), dtype=float)
        for k in model.active_arities(xc):
            nodes, weights = model.theta_nodes(k, self.order)
            acc = np.zeros(xc.size)
            for th, wt in zip(nodes, weights):
                theta = np.full(xc.size, th)
                tot = sum(np.interp(model.frag_map(k, j, xc, theta), xc, w) for j in range(1, k + 1))
                acc += wt * (tot - w) ** 2
            out += r * p[:, k] * acc
        return out

    def integrand(self) -> Array:
        if self._gamma is None:
            self._gamma = np.array([float(np.sum(self.carre_du_champ(w) * d.values) * self.grid.dx)
                                    for d, w in zip(self.densities, self.test_functions)])
        return self._gamma

    def initial_variance(self) -> float:
        n0 = self.densities[0]
        w0 = self.test_functions[0]
        m = n0.mass()
        mean = float(np.sum(w0 * n0.values) * self.grid.dx) / m
        second = float(np.sum(w0 * w0 * n0.values) * self.grid.dx) / m
        return second - mean * mean

    def bracket(self) -> float:
        """Var_{mu0}(T_t f) + int_0^t X_s(Gamma(T_{t-s} f)) ds (trapezoid in s)."""
        return self.initial_variance() + float(integrate.trapezoid(self.integrand(), self.times))

    def mean_value(self) -> float:
        f_t = self.test_functions[-1]
        return float(np.sum(f_t * self.densities[-1].values) * self.grid.dx)


def bracket_solution(model: ModelSpec, grid: Grid, f: Callable, init: GridDensity, t: float,
                     n_times: int = 201, order: int = DEFAULT_THETA_ORDER) -> BracketSolution:
    times = np.linspace(0.0, t, n_times)
    traj = pde_solve(model, init, t, times=times)
    back = backward_test_functions(model, grid, f, t, times, order)
    tests = [back[round(float(s), 12)] for s in times]
    return BracketSolution(model, grid, t, times, traj.states, tests, order)
