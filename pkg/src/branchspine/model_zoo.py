"""Model descriptions for branching Markov processes.

A model bundles the motion between divisions (drift ``b`` and diffusion
coefficient ``sigma`` of ``Gf = b.grad f + sigma * Laplacian f``), the
division rate ``r``, the offspring law ``p_k`` and the offspring placement
maps ``F_j^(k)(x, theta)``.  States are numpy arrays of shape ``(n,)`` for
one-dimensional models and ``(n, d)`` otherwise.

Built-in models: equal and asymmetric mitosis (size-structured cells),
the parasite-infection model, branching Ornstein-Uhlenbeck and self-similar
fragmentation with a finite dislocation measure.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

Array = np.ndarray

DEFAULT_THETA_ORDER = 64


class InvalidModelError(ValueError):
    """Raised when model parameters do not describe a valid model."""


class DomainError(ValueError):
    """Raised when a state lies outside the model state space."""


class NonErgodicWarning(UserWarning):
    pass


@lru_cache(maxsize=32)
def gauss_legendre01(order: int) -> tuple[Array, Array]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    return 0.5 * (nodes + 1.0), 0.5 * weights


# ---------------------------------------------------------------------------
# state spaces


@dataclass(frozen=True)
class StateSpace:
    """Closed subset of R^d: ``half_line`` [0, inf), ``full`` R^d or ``box``."""

    kind: str = "half_line"
    dim: int = 1
    lower: Optional[tuple] = None
    upper: Optional[tuple] = None

    def contains(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        finite = np.isfinite(x) if self.dim == 1 else np.all(np.isfinite(x), axis=-1)
        if self.kind == "full":
            return finite
        if self.kind == "half_line":
            ok = x >= 0 if self.dim == 1 else np.all(x >= 0, axis=-1)
            return finite & ok
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        ok = (x >= lo) & (x <= hi)
        return finite & (ok if self.dim == 1 else np.all(ok, axis=-1))

    def project(self, x: Array) -> Array:
        """Push Euler-Maruyama overshoots back onto the closed set."""
        if self.kind == "full":
            return x
        if self.kind == "half_line":
            return np.maximum(x, 0.0)
        return np.clip(x, np.asarray(self.lower, float), np.asarray(self.upper, float))


# ---------------------------------------------------------------------------
# division rates


@dataclass(frozen=True)
class ConstantRate:
    r0: float

    def __call__(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        shape = x.shape if x.ndim <= 1 else x.shape[:1]
        return np.full(shape, float(self.r0))

    def hazard_inverse_linear(self, x: Array, e: Array) -> Array:
        # time to accumulate hazard e along x -> x + s
        return np.asarray(e, dtype=float) / self.r0


@dataclass(frozen=True)
class AffineRate:
    """r(x) = a x + b."""

    a: float
    b: float

    def __call__(self, x: Array) -> Array:
        return self.a * np.asarray(x, dtype=float) + self.b

    def hazard_inverse_linear(self, x: Array, e: Array) -> Array:
        # a (x s + s^2/2) + b s = e, stable root of the quadratic
        r = self(x)
        return 2.0 * e / (r + np.sqrt(r * r + 2.0 * self.a * e))


@dataclass(frozen=True)
class PlateauRate:
    """r(x) = min(r0 + slope x, r_inf): continuous, constant beyond x*."""

    r0: float
    slope: float
    r_inf: float

    @property
    def x_star(self) -> float:
        return (self.r_inf - self.r0) / self.slope if self.slope > 0 else 0.0

    def __call__(self, x: Array) -> Array:
        return np.minimum(self.r0 + self.slope * np.asarray(x, dtype=float), self.r_inf)

    def hazard_inverse_linear(self, x: Array, e: Array) -> Array:
        x = np.asarray(x, dtype=float)
        e = np.asarray(e, dtype=float)
        if self.slope == 0:
            return e / self.r_inf
        xs = self.x_star
        to_plateau = np.maximum(xs - x, 0.0)
        r_here = self(x)
        h_plateau = r_here * to_plateau + 0.5 * self.slope * to_plateau**2
        affine = 2.0 * e / (r_here + np.sqrt(r_here * r_here + 2.0 * self.slope * e))
        flat = to_plateau + (e - h_plateau) / self.r_inf
        return np.where(e <= h_plateau, affine, flat)


@dataclass(frozen=True)
class PowerRate:
    """r(x) = coef * |x|^power + base (super-linear when power > 1)."""

    coef: float
    power: float
    base: float = 0.0

    def __call__(self, x: Array) -> Array:
        return self.coef * np.abs(np.asarray(x, dtype=float)) ** self.power + self.base


# ---------------------------------------------------------------------------
# split laws for size-structured division


@dataclass(frozen=True)
class SplitLaw:
    """Law of the fraction q given to the first child, through its quantile."""

    quantile: Callable[[Array], Array]
    cdf: Optional[Callable[[Array], Array]] = None
    name: str = "custom"
    point: Optional[float] = None

    def mean_qq(self, order: int = DEFAULT_THETA_ORDER) -> float:
        """E[q (1 - q)] by quadrature in theta."""
        if self.point is not None:
            return self.point * (1.0 - self.point)
        nodes, weights = gauss_legendre01(order)
        q = self.quantile(nodes)
        return float(np.sum(weights * q * (1 - q)))


def equal_split() -> SplitLaw:
    return SplitLaw(
        quantile=lambda t: np.full_like(np.asarray(t, dtype=float), 0.5),
        # mid-value at the jump: an atom on a cell edge is shared by both cells
        cdf=lambda c: 0.5 * np.sign(np.asarray(c, dtype=float) - 0.5) + 0.5,
        name="equal",
        point=0.5,
    )


def uniform_split() -> SplitLaw:
    return SplitLaw(
        quantile=lambda t: np.asarray(t, dtype=float),
        cdf=lambda c: np.clip(np.asarray(c, dtype=float), 0.0, 1.0),
        name="uniform",
    )


def beta_split(shape: float) -> SplitLaw:
    dist = stats.beta(shape, shape)
    return SplitLaw(quantile=dist.ppf, cdf=dist.cdf, name=f"beta({shape},{shape})")


def check_symmetric_split(law: SplitLaw, n: int = 100_000, seed: int = 12345) -> None:
    """Reject split laws whose sampled mean fraction is not 1/2."""
    if law.point is not None:
        if law.point != 0.5:
            raise InvalidModelError(f"point split {law.point} is not symmetric")
        return
    theta = np.random.default_rng(seed).random(n)
    q = np.asarray(law.quantile(theta), dtype=float)
    if np.any((q < 0) | (q > 1)):
        raise InvalidModelError("split fractions must lie in [0, 1]")
    se = q.std(ddof=1) / math.sqrt(n)
    if abs(q.mean() - 0.5) > 4.0 * se + 1e-12:
        raise InvalidModelError(
            f"split law {law.name} is not symmetric: sampled mean {q.mean():.5f} "
            f"differs from 1/2 by more than 4 standard errors ({se:.2e})"
        )


# ---------------------------------------------------------------------------
# model and eigenpair containers


@dataclass
class ModelSpec:
    """Full dynamical description of a branching Markov process.

    ``frag_map(k, j, x, theta)`` places child ``j`` (1-based) of a parent at
    ``x`` that splits into ``k`` children; ``offspring_pmf(x)`` returns the
    ``(n, kbar + 1)`` matrix of ``p_0(x), ..., p_kbar(x)``.

    Optional fields speed simulation up when the motion allows it:
    ``flow(x, s)`` is the exact deterministic flow (diffusion must be zero),
    ``hazard_inverse(x, e)`` the time needed to accumulate hazard ``e``
    from ``x`` along that flow.  ``rate_bound(x0, x1)`` bounds ``r`` on the
    path between two states; the default (endpoint maximum) is valid for
    rates monotone along the path or convex.
    """

    name: str
    dim: int
    state_space: StateSpace
    drift: Callable[[Array], Array]
    diffusion: float | Callable[[Array], Array]
    rate: Callable[[Array], Array]
    offspring_pmf: Callable[[Array], Array]
    frag_map: Callable[[int, int, Array, Array], Array]
    kbar: int
    theta_independent: bool = False
    theta_rule: Optional[Callable[[int], tuple[Array, Array]]] = None
    flow: Optional[Callable[[Array, Array], Array]] = None
    hazard_inverse: Optional[Callable[[Array, Array], Array]] = None
    rate_bound: Optional[Callable[[Array, Array], Array]] = None
    size_structured: bool = False
    fraction_cdfs: Optional[dict] = None
    equal_halving: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise InvalidModelError("dimension must be positive")
        if self.kbar < 0:
            raise InvalidModelError("maximal arity must be non-negative")
        if self.flow is not None and not self.diffusion_is_zero:
            raise InvalidModelError("an exact flow requires zero diffusion")

    # -- helpers -----------------------------------------------------------
    @property
    def diffusion_is_zero(self) -> bool:
        return not callable(self.diffusion) and float(self.diffusion) == 0.0

    def states(self, x, check: bool = True) -> Array:
        """Coerce ``x`` to a state array, raising DomainError outside E."""
        x = np.asarray(x, dtype=float)
        if self.dim == 1:
            x = x.reshape(-1)
        else:
            x = x.reshape(-1, self.dim)
        if check and not np.all(self.state_space.contains(x)):
            raise DomainError(f"state outside {self.state_space.kind} state space")
        return x

    def n_states(self, x: Array) -> int:
        return x.shape[0]

    def diffusion_at(self, x: Array) -> Array:
        if callable(self.diffusion):
            return np.asarray(self.diffusion(x), dtype=float)
        return np.full(x.shape[0], float(self.diffusion))

    def pmf(self, x: Array) -> Array:
        p = np.asarray(self.offspring_pmf(x), dtype=float)
        return np.broadcast_to(p, (x.shape[0], self.kbar + 1))

    def mean_offspring(self, x) -> Array:
        x = self.states(x)
        return self.pmf(x) @ np.arange(self.kbar + 1)

    def theta_nodes(self, k: int, order: int = DEFAULT_THETA_ORDER) -> tuple[Array, Array]:
        if self.theta_independent:
            return np.array([0.5]), np.array([1.0])
        if self.theta_rule is not None:
            return self.theta_rule(k)
        return gauss_legendre01(order)

    def local_rate_bound(self, x0: Array, x1: Array) -> Array:
        """Upper bound of r on the path from x0 to x1."""
        if self.rate_bound is not None:
            return np.asarray(self.rate_bound(x0, x1), dtype=float)
        return np.maximum(self.rate(x0), self.rate(x1))

    def rate_window_bound(self, x, h: float) -> Array:
        """Upper bound r_bar(x, h) over a window of length h of the flow."""
        x = self.states(x)
        if self.flow is None:
            raise InvalidModelError("window bounds need a deterministic flow")
        return self.local_rate_bound(x, self.flow(x, np.full(x.shape[0], h)))

    def active_arities(self, x: Array) -> list[int]:
        p = self.pmf(x)
        return [k for k in range(1, self.kbar + 1) if np.any(p[:, k] > 0)]


@dataclass
class EigenPair:
    """Positive eigenfunction V of the mean generator with eigenvalue lambda0.

    ``ratio_bound`` bounds V(F_j^(k)(x, theta)) / V(x); it is the rejection
    envelope used when sampling the V-biased jumps of the auxiliary process.
    """

    V: Callable[[Array], Array]
    grad_V: Optional[Callable[[Array], Array]]
    lambda0: float
    lap_V: Optional[Callable[[Array], Array]] = None
    ratio_bound: float = 1.0
    name: str = "eigenpair"
    residual: Optional[float] = None


# ---------------------------------------------------------------------------
# test functions and finite differences


@dataclass
class SmoothFn:
    """Scalar function with optional analytic gradient and Laplacian."""

    f: Callable[[Array], Array]
    grad: Optional[Callable[[Array], Array]] = None
    lap: Optional[Callable[[Array], Array]] = None

    def __call__(self, x: Array) -> Array:
        return np.asarray(self.f(x), dtype=float)


def as_smooth(f) -> SmoothFn:
    if isinstance(f, SmoothFn):
        return f
    return SmoothFn(f)


def _steps(x: Array, rel: float) -> Array:
    return rel * np.maximum(1.0, np.abs(x))


def fd_grad(f: Callable, x: Array, rel: float = 1e-5) -> Array:
    if x.ndim == 1:
        h = _steps(x, rel)
        return (f(x + h) - f(x - h)) / (2 * h)
    out = np.empty_like(x)
    for i in range(x.shape[1]):
        h = _steps(x[:, i], rel)
        e = np.zeros_like(x)
        e[:, i] = h
        out[:, i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def fd_lap(f: Callable, x: Array, rel: float = 1e-4) -> Array:
    fx = f(x)
    if x.ndim == 1:
        h = _steps(x, rel)
        return (f(x + h) - 2 * fx + f(x - h)) / h**2
    out = np.zeros(x.shape[0])
    for i in range(x.shape[1]):
        h = _steps(x[:, i], rel)
        e = np.zeros_like(x)
        e[:, i] = h
        out += (f(x + e) - 2 * fx + f(x - e)) / h**2
    return out


def _grad(f: SmoothFn, x: Array) -> Array:
    return np.asarray(f.grad(x), dtype=float) if f.grad is not None else fd_grad(f, x)


def _lap(f: SmoothFn, x: Array) -> Array:
    return np.asarray(f.lap(x), dtype=float) if f.lap is not None else fd_lap(f, x)


def motion_generator(model: ModelSpec, f: SmoothFn, x: Array) -> Array:
    """Gf(x) = b(x).grad f(x) + sigma(x) Laplacian f(x)."""
    b = np.asarray(model.drift(x), dtype=float)
    g = _grad(f, x)
    out = b * g if x.ndim == 1 else np.sum(b * g, axis=1)
    if not model.diffusion_is_zero:
        out = out + model.diffusion_at(x) * _lap(f, x)
    return out


# ---------------------------------------------------------------------------
# operators


def branch_average(model: ModelSpec, f: Callable, x: Array, order: int = DEFAULT_THETA_ORDER) -> Array:
    """sum_k p_k(x) int_0^1 sum_{j<=k} f(F_j^(k)(x, theta)) dtheta."""
    p = model.pmf(x)
    n = x.shape[0]
    out = np.zeros(n)
    for k in model.active_arities(x):
        nodes, weights = model.theta_nodes(k, order)
        acc = np.zeros(n)
        for th, w in zip(nodes, weights):
            theta = np.full(n, th)
            for j in range(1, k + 1):
                acc += w * f(model.frag_map(k, j, x, theta))
        out += p[:, k] * acc
    return out


def apply_mean_generator(model: ModelSpec, f, x, order: int = DEFAULT_THETA_ORDER) -> Array:
    """Mean-semigroup generator applied to f at the states x.

    Gf(x) + r(x) [sum_k p_k(x) int sum_j f(F_j^(k)(x, theta)) dtheta - f(x)],
    with the theta integral by Gauss-Legendre quadrature of the given order
    (skipped for theta-independent maps).
    """
    f = as_smooth(f)
    x = model.states(x)
    fx = f(x)
    return motion_generator(model, f, x) + model.rate(x) * (branch_average(model, f, x, order) - fx)


def eigen_residual(model: ModelSpec, eig: EigenPair, grid, order: int = DEFAULT_THETA_ORDER) -> float:
    """max over the grid of |GV - lambda0 V| / V."""
    x = model.states(grid)
    if x.shape[0] == 0:
        raise ValueError("empty residual grid")
    V = SmoothFn(eig.V, eig.grad_V, eig.lap_V)
    v = V(x)
    if np.any(v <= 0):
        raise DomainError("eigenfunction must be positive on the grid")
    res = np.abs(apply_mean_generator(model, V, x, order) - eig.lambda0 * v) / v
    return float(np.max(res))


def fork_operator_J2(model: ModelSpec, f, g, x, eig: Optional[EigenPair] = None,
                     order: int = DEFAULT_THETA_ORDER) -> Array:
    """Sibling-pair operator: int sum_{a != b} sum_{k >= max(a,b)} p_k f(F_a) g(F_b) dtheta.

    With ``eig`` given, f and g are first multiplied by V.
    """
    x = model.states(x)
    if eig is not None:
        f0, g0 = f, g
        f = lambda y: eig.V(y) * f0(y)  # noqa: E731
        g = lambda y: eig.V(y) * g0(y)  # noqa: E731
    p = model.pmf(x)
    n = x.shape[0]
    out = np.zeros(n)
    for k in model.active_arities(x):
        if k < 2:
            continue
        nodes, weights = model.theta_nodes(k, order)
        acc = np.zeros(n)
        for th, w in zip(nodes, weights):
            theta = np.full(n, th)
            children = [model.frag_map(k, j, x, theta) for j in range(1, k + 1)]
            fv = [np.asarray(f(c), dtype=float) for c in children]
            gv = [np.asarray(g(c), dtype=float) for c in children]
            pair = np.sum(fv, axis=0) * np.sum(gv, axis=0) - np.sum(np.multiply(fv, gv), axis=0)
            acc += w * pair
        out += p[:, k] * acc
    return out


# ---------------------------------------------------------------------------
# built-in models


def _binary_pmf(x: Array) -> Array:
    p = np.zeros((x.shape[0], 3))
    p[:, 2] = 1.0
    return p


def _make_rate(rate_kind) -> Callable:
    if isinstance(rate_kind, (ConstantRate, AffineRate, PlateauRate, PowerRate)):
        rate = rate_kind
    elif isinstance(rate_kind, (int, float)):
        rate = ConstantRate(float(rate_kind))
    elif callable(rate_kind):
        return rate_kind
    else:
        raise InvalidModelError(f"unknown rate specification {rate_kind!r}")
    if isinstance(rate, ConstantRate):
        if rate.r0 <= 0:
            raise InvalidModelError("constant rate must be positive")
    elif isinstance(rate, AffineRate):
        if rate.a < 0 or rate.b < 0 or (rate.a == 0 and rate.b == 0):
            raise InvalidModelError("affine rate needs a, b >= 0 with a or b positive")
    elif isinstance(rate, PlateauRate):
        if rate.r0 <= 0 or rate.slope < 0 or rate.r_inf < rate.r0:
            raise InvalidModelError("plateau rate needs 0 < r0 <= r_inf and slope >= 0")
    elif isinstance(rate, PowerRate):
        if rate.coef < 0 or rate.base < 0 or (rate.coef == 0 and rate.base == 0):
            raise InvalidModelError("power rate must be non-negative and not identically zero")
    return rate


def _split_fraction_cdfs(law: SplitLaw) -> dict:
    cdf = law.cdf
    if cdf is None:
        return None
    # the second child's fraction 1 - q has the same law by symmetry
    return {(2, 1): cdf, (2, 2): cdf}


def make_asymmetric_mitosis(rate_kind, split: SplitLaw, validate: bool = True) -> ModelSpec:
    """Linear growth, binary division into (q x, (1 - q) x) with q = F^-1(theta)."""
    if validate:
        check_symmetric_split(split)
    rate = _make_rate(rate_kind)
    point = split.point

    def frag(k, j, x, theta):
        q = np.full_like(x, point) if point is not None else np.asarray(split.quantile(theta), dtype=float)
        return q * x if j == 1 else (1.0 - q) * x

    hazard = getattr(rate, "hazard_inverse_linear", None)
    return ModelSpec(
        name="equal_mitosis" if point == 0.5 else "asymmetric_mitosis",
        dim=1,
        state_space=StateSpace("half_line", 1),
        drift=lambda x: np.ones_like(x),
        diffusion=0.0,
        rate=rate,
        offspring_pmf=_binary_pmf,
        frag_map=frag,
        kbar=2,
        theta_independent=point is not None,
        flow=lambda x, s: x + s,
        hazard_inverse=hazard,
        size_structured=True,
        fraction_cdfs=_split_fraction_cdfs(split),
        equal_halving=point == 0.5,
        params={"rate": rate, "split": split.name},
    )


def make_equal_mitosis(rate_kind) -> ModelSpec:
    """Equal mitosis: linear growth, both children at x / 2."""
    return make_asymmetric_mitosis(rate_kind, equal_split(), validate=False)


def make_parasite(a: float, b: float, rate_kind, split: SplitLaw) -> ModelSpec:
    """Cell division with parasite infection.

    Gf(x) = a x f'(x) + b x f''(x); both children share one draw H of a
    symmetric law and sit at (H x, (1 - H) x).
    """
    if a < 0 or b < 0:
        raise InvalidModelError("parasite model needs a, b >= 0")
    check_symmetric_split(split)
    rate = _make_rate(rate_kind)
    point = split.point

    def frag(k, j, x, theta):
        q = np.full_like(x, point) if point is not None else np.asarray(split.quantile(theta), dtype=float)
        return q * x if j == 1 else (1.0 - q) * x

    deterministic = b == 0
    hazard = None
    if deterministic and isinstance(rate, ConstantRate):
        hazard = lambda x, e: np.asarray(e, dtype=float) / rate.r0  # noqa: E731
    return ModelSpec(
        name="parasite",
        dim=1,
        state_space=StateSpace("half_line", 1),
        drift=lambda x: a * x,
        diffusion=(0.0 if deterministic else (lambda x: b * np.maximum(x, 0.0))),
        rate=rate,
        offspring_pmf=_binary_pmf,
        frag_map=frag,
        kbar=2,
        theta_independent=point is not None,
        flow=(lambda x, s: x * np.exp(a * s)) if deterministic else None,
        hazard_inverse=hazard,
        size_structured=True,
        fraction_cdfs=_split_fraction_cdfs(split),
        equal_halving=point == 0.5,
        params={"a": a, "b": b, "rate": rate, "split": split.name},
    )


def _sqnorm(x: Array) -> Array:
    return x * x if x.ndim == 1 else np.sum(x * x, axis=1)


def make_branching_ou(d: int, sigma: float, g: float, a: float, b: float) -> ModelSpec:
    """Branching Ornstein-Uhlenbeck: Gf = sigma^2/2 Lap f - g x.grad f, r = b|x|^2 + a.

    Division is dyadic and local (both children at the parent's position).
    The stored diffusion coefficient is sigma^2 / 2.
    """
    if sigma <= 0 or g <= 0 or a < 0 or b < 0 or (a == 0 and b == 0):
        raise InvalidModelError("branching OU needs sigma, g > 0, a, b >= 0 and a + b > 0")
    if g <= sigma * math.sqrt(2 * b):
        warnings.warn("g <= sigma sqrt(2b): the auxiliary process is not ergodic", NonErgodicWarning)

    def rate(x):
        return b * _sqnorm(np.asarray(x, dtype=float)) + a

    return ModelSpec(
        name="branching_ou",
        dim=d,
        state_space=StateSpace("full", d),
        drift=lambda x: -g * x,
        diffusion=0.5 * sigma**2,
        rate=rate,
        offspring_pmf=_binary_pmf,
        frag_map=lambda k, j, x, theta: x.copy(),
        kbar=2,
        theta_independent=True,
        params={"d": d, "sigma": sigma, "g": g, "a": a, "b": b},
    )


def make_fragmentation(alpha: float, dislocation: Sequence[tuple[Sequence[float], float]]) -> ModelSpec:
    """Self-similar fragmentation with a finite dislocation measure.

    ``dislocation`` lists (mass partition, weight) pairs; a block of mass x
    waits an exponential time of rate x^alpha nu(S) and dislocates into
    ``s x`` with s drawn proportionally to the weights.
    """
    parts: list[tuple[tuple[float, ...], float]] = []
    for s, w in dislocation:
        s = tuple(float(v) for v in s if v != 0)
        if w <= 0:
            raise InvalidModelError("dislocation weights must be positive")
        if not s or any(v < 0 or v > 1 for v in s):
            raise InvalidModelError("partition entries must lie in (0, 1]")
        if any(s[i] < s[i + 1] for i in range(len(s) - 1)):
            raise InvalidModelError(f"partition {s} is not sorted decreasingly")
        if sum(s) > 1 + 1e-12:
            raise InvalidModelError(f"partition {s} has total mass above 1")
        if s == (1.0,):
            raise InvalidModelError("the trivial partition (1, 0, ...) carries no mass")
        parts.append((s, float(w)))
    if not parts:
        raise InvalidModelError("empty dislocation measure")
    total = sum(w for _, w in parts)
    kbar = max(len(s) for s, _ in parts)
    by_k: dict[int, list[tuple[tuple[float, ...], float]]] = {}
    for s, w in parts:
        by_k.setdefault(len(s), []).append((s, w))
    pk = np.zeros(kbar + 1)
    cum: dict[int, Array] = {}
    table: dict[int, Array] = {}
    for k, items in by_k.items():
        wk = np.array([w for _, w in items])
        pk[k] = wk.sum() / total
        cum[k] = np.cumsum(wk) / wk.sum()
        table[k] = np.array([s for s, _ in items])

    def frag(k, j, x, theta):
        idx = np.minimum(np.searchsorted(cum[k], theta, side="right"), len(cum[k]) - 1)
        return table[k][idx, j - 1] * x

    def theta_rule(k):
        c = np.concatenate([[0.0], cum[k]])
        return 0.5 * (c[:-1] + c[1:]), np.diff(c)

    fraction_cdfs = {}
    for k in by_k:
        probs = np.diff(np.concatenate([[0.0], cum[k]]))
        for j in range(1, k + 1):
            vals = table[k][:, j - 1]
            fraction_cdfs[(k, j)] = (lambda c, v=vals, p=probs:
                                     np.sum(p * (np.asarray(c, float)[..., None] >= v), axis=-1))

    def rate(x):
        return np.asarray(x, dtype=float) ** alpha * total

    return ModelSpec(
        name="fragmentation",
        dim=1,
        state_space=StateSpace("half_line", 1),
        drift=lambda x: np.zeros_like(x),
        diffusion=0.0,
        rate=rate,
        offspring_pmf=lambda x: pk,
        frag_map=frag,
        kbar=kbar,
        theta_rule=theta_rule,
        flow=lambda x, s: x.copy(),
        hazard_inverse=lambda x, e: np.asarray(e, dtype=float) / rate(x),
        rate_bound=lambda x0, x1: rate(x0),
        size_structured=True,
        fraction_cdfs=fraction_cdfs,
        params={"alpha": alpha, "nu_total": total, "partitions": parts},
    )


# ---------------------------------------------------------------------------
# shipped eigenpairs


def eigenpair_constant(model: ModelSpec) -> EigenPair:
    """V = 1 for constant rate and offspring law, lambda0 = r (m - 1)."""
    x = model.states([0.0] if model.dim == 1 else [np.zeros(model.dim)])
    lam = float(model.rate(x)[0] * (model.mean_offspring(x)[0] - 1.0))
    return EigenPair(
        V=lambda y: np.ones(np.asarray(y).shape[0]),
        grad_V=lambda y: np.zeros_like(np.asarray(y, dtype=float)),
        lambda0=lam,
        lap_V=lambda y: np.zeros(np.asarray(y).shape[0]),
        name="constant",
    )


def _linear_eigenpair(c: float, lam: float, name: str) -> EigenPair:
    return EigenPair(
        V=lambda x: c * np.asarray(x, dtype=float) + 1.0,
        grad_V=lambda x: np.full_like(np.asarray(x, dtype=float), c),
        lambda0=lam,
        lap_V=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        name=name,
    )


def eigenpair_affine_mitosis(a: float, b: float) -> EigenPair:
    """V(x) = c x + 1 with c = (sqrt(b^2 + 4a) - b)/2 and lambda0 = (sqrt(b^2 + 4a) + b)/2."""
    if a < 0 or b < 0 or (a == 0 and b == 0):
        raise InvalidModelError("affine eigenpair needs a, b >= 0, not both zero")
    root = math.sqrt(b * b + 4 * a)
    return _linear_eigenpair(0.5 * (root - b), 0.5 * (root + b), "affine_mitosis")


def eigenpair_parasite_linear(a: float) -> EigenPair:
    """V(x) = x, lambda0 = a."""
    return EigenPair(
        V=lambda x: np.asarray(x, dtype=float).copy(),
        grad_V=lambda x: np.ones_like(np.asarray(x, dtype=float)),
        lambda0=float(a),
        lap_V=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        name="parasite_linear",
    )


def eigenpair_parasite_affine(a: float, c: float, d: float) -> EigenPair:
    """V1(x) = tau x + 1 with tau = c / (d - a), lambda1 = d, for r(x) = c x + d."""
    if not (d > a or (c == 0 and d > 0)):
        raise InvalidModelError("second parasite eigenpair needs d > a (or c = 0, d > 0)")
    tau = c / (d - a) if c != 0 else 0.0
    return _linear_eigenpair(tau, float(d), "parasite_affine")


def ou_exponents(g: float, sigma: float, b: float) -> tuple[float, float]:
    """(Gamma, alpha) for the branching OU eigenfunction exp(Gamma |x|^2)."""
    disc = g * g - 2 * b * sigma * sigma
    if disc <= 0:
        raise InvalidModelError("g <= sigma sqrt(2b): no ergodic eigenpair")
    alpha = math.sqrt(disc)
    return (g - alpha) / (2 * sigma * sigma), alpha


def eigenpair_ou(d: int, sigma: float, g: float, a: float, b: float) -> EigenPair:
    """V(x) = exp(Gamma |x|^2), lambda0 = d sigma^2 Gamma + a."""
    gam, _ = ou_exponents(g, sigma, b)

    def V(x):
        return np.exp(gam * _sqnorm(np.asarray(x, dtype=float)))

    def grad(x):
        x = np.asarray(x, dtype=float)
        v = V(x)
        return 2 * gam * x * (v if x.ndim == 1 else v[:, None])

    def lap(x):
        x = np.asarray(x, dtype=float)
        return (2 * gam * d + 4 * gam * gam * _sqnorm(x)) * V(x)

    return EigenPair(V=V, grad_V=grad, lambda0=d * sigma * sigma * gam + a, lap_V=lap, name="ou")


def eigenpair_fragmentation(model: ModelSpec, p: float) -> EigenPair:
    """V(x) = x^p; an eigenfunction only for self-similarity index 0."""
    alpha = model.params.get("alpha")
    if alpha is None:
        raise InvalidModelError("not a fragmentation model")
    if alpha != 0:
        raise InvalidModelError("x^p is an eigenfunction only when alpha = 0")
    lam = sum(w * (sum(si**p for si in s) - 1.0) for s, w in model.params["partitions"])
    return EigenPair(
        V=lambda x: np.asarray(x, dtype=float) ** p,
        grad_V=lambda x: p * np.asarray(x, dtype=float) ** (p - 1),
        lambda0=float(lam),
        lap_V=lambda x: p * (p - 1) * np.asarray(x, dtype=float) ** (p - 2),
        name=f"fragmentation_x^{p}",
    )


def eigenpair_numeric(model: ModelSpec, x_max: float = 200.0, n_cells: int = 4096,
                      tol: float = 1e-10, max_iters: int = 200_000) -> EigenPair:
    """Eigenpair by power iteration on the discretised mean generator."""
    from .pde import Grid, pde_power_iteration

    return pde_power_iteration(model, Grid(x_max, n_cells), tol=tol, max_iters=max_iters)


def closed_form_eigenpair(model: ModelSpec) -> EigenPair:
    """Shipped closed-form eigenpair for a built-in model, if one exists."""
    rate = model.params.get("rate")
    if model.name in ("equal_mitosis", "asymmetric_mitosis"):
        if isinstance(rate, ConstantRate):
            return eigenpair_affine_mitosis(0.0, rate.r0)
        if isinstance(rate, AffineRate):
            return eigenpair_affine_mitosis(rate.a, rate.b)
        raise InvalidModelError("closed-form eigenpair needs a constant or affine rate")
    if model.name == "parasite":
        return eigenpair_parasite_linear(model.params["a"])
    if model.name == "branching_ou":
        p = model.params
        return eigenpair_ou(p["d"], p["sigma"], p["g"], p["a"], p["b"])
    if model.name == "fragmentation":
        return eigenpair_fragmentation(model, 2.0)
    raise InvalidModelError(f"no closed-form eigenpair for {model.name}")
