"""Command-line experiment runner.

Usage: ``branchspine <command> [--config FILE] [--seed N] [--out DIR] ...``

Configs are INI files with sections [model], [eigen], [run], [check] and
[output].  Every command writes results.json (check reports) and
manifest.json (resolved config, version, wall time) plus any CSV dumps.
Exit codes: 0 all checks pass, 1 a check failed, 2 explosion guard,
3 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import sys
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .auxiliary import long_run_distribution
from .branching_sim import ExplosionError, SimConfig, coupled_mitosis_simulate, run_replicas, simulate
from .estimators import (CheckReport, fork_check, growth_bound, ks_distance, longtime_limit_check,
                         macroscopic_check, make_report, martingale_check, mean_se, moments_check, mto_battery,
                         ou_closed_forms, ou_literal_limit_cdf, closed_moment_tcp, sub_seed,
                         tcp_invariant_cdf, tcp_invariant_density, variance_bracket_check,
                         whole_tree_check, yule_check)
from .model_zoo import (AffineRate, ConstantRate, InvalidModelError, ModelSpec, PlateauRate,
                        PowerRate, beta_split, closed_form_eigenpair, eigen_residual, eigenpair_fragmentation, eigenpair_numeric,
                        equal_split, make_asymmetric_mitosis, make_equal_mitosis, make_branching_ou, make_fragmentation,
                        make_parasite, uniform_split)
from . import pde

EXIT_OK, EXIT_FAIL, EXIT_EXPLOSION, EXIT_CONFIG = 0, 1, 2, 3
OUT_ENV = "BRANCHSPINE_OUT"


class ConfigError(ValueError):
    pass


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.replace(";", ",").split(",") if v.strip()]


def _strs(s: str) -> list[str]:
    return [v.strip() for v in s.replace(";", ",").split(",") if v.strip()]


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# section -> key -> (parser, default); None defaults mean "unset"
SCHEMA: dict[str, dict[str, tuple[Callable, object]]] = {
    "model": {
        "kind": (str, "equal_mitosis"),
        "rate": (str, "constant"),
        "r0": (float, 1.0),
        "a": (float, None),
        "b": (float, None),
        "slope": (float, 1.0),
        "r_inf": (float, 3.0),
        "coef": (float, 1.0),
        "power": (float, 2.0),
        "base": (float, 0.0),
        "split": (str, "uniform"),
        "split_shape": (float, 2.0),
        "growth": (float, 1.0),
        "noise": (float, 0.0),
        "d": (int, 1),
        "sigma": (float, 1.0),
        "g": (float, 1.0),
        "alpha": (float, 0.0),
        "partitions": (str, "0.5,0.5:1"),
    },
    "eigen": {
        "kind": (str, "closed-form"),
        "x_max": (float, 200.0),
        "n_cells": (int, 4096),
        "p": (float, 2.0),
    },
    "run": {
        "seed": (int, None),
        "replicas": (int, 10_000),
        "T": (float, 1.0),
        "dt": (float, 0.01),
        "snapshot_times": (_floats, None),
        "x0": (float, 1.0),
        "max_particles": (int, 1_000_000),
        "jobs": (int, 1),
    },
    "check": {
        "checks": (_strs, []),
        "functions": (_strs, ["one", "x", "exp_neg", "sin"]),
        "times": (_floats, [0.5, 1.0, 2.0]),
        "n_aux": (int, None),
        "quad_points": (int, 17),
        "inner_replicas": (int, 100),
        "outer_replicas": (int, 200),
        "n_samples": (int, 100_000),
        "t_large": (float, 12.0),
        "n_scale": (int, 10_000),
        "ks_max": (float, 0.02),
        "n_cells": (int, 1024),
        "x_max": (float, 20.0),
    },
    "output": {
        "dir": (str, None),
        "tree_dump": (_bool, False),
        "formats": (_strs, ["json", "csv"]),
    },
}

CHECKS = ("simulate", "eigen", "mto", "tree", "fork", "martingale", "longtime", "moments", "yule", "density",
          "couple", "nonexplosion", "ou", "frag", "clt", "macro")


def load_config(path: Optional[str]) -> dict:
    """Parse and validate an INI config; returns the fully resolved dict."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path is not None:
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
    unknown_sections = [s for s in cp.sections() if s not in SCHEMA]
    if unknown_sections:
        raise ConfigError(f"unknown sections: {', '.join(unknown_sections)}")
    out: dict = {}
    for sec, keys in SCHEMA.items():
        out[sec] = {k: d for k, (_, d) in keys.items()}
        if cp.has_section(sec):
            unknown = [k for k in cp[sec] if k not in keys]
            if unknown:
                raise ConfigError(f"unknown keys in [{sec}]: {', '.join(sorted(unknown))}")
            for k, raw in cp[sec].items():
                try:
                    out[sec][k] = keys[k][0](raw)
                except ValueError as exc:
                    raise ConfigError(f"[{sec}] {k}: {exc}") from exc
    bad = [c for c in out["check"]["checks"] if c not in CHECKS]
    if bad:
        raise ConfigError(f"unknown checks: {', '.join(bad)}")
    return out


# ---------------------------------------------------------------------------
# model construction


def _rate(m: dict):
    kind = m["rate"]
    if kind == "constant":
        return ConstantRate(m["r0"])
    if kind == "affine":
        return AffineRate(m["a"] if m["a"] is not None else 1.0, m["b"] if m["b"] is not None else 0.0)
    if kind == "plateau":
        return PlateauRate(m["r0"], m["slope"], m["r_inf"])
    if kind == "power":
        return PowerRate(m["coef"], m["power"], m["base"])
    raise ConfigError(f"unknown rate kind {kind!r}")


def _split(m: dict):
    kind = m["split"]
    if kind == "equal":
        return equal_split()
    if kind == "uniform":
        return uniform_split()
    if kind == "beta":
        return beta_split(m["split_shape"])
    raise ConfigError(f"unknown split law {kind!r}")


def _partitions(text: str) -> list:
    parts = []
    for item in text.split(";"):
        if not item.strip():
            continue
        s, _, w = item.partition(":")
        parts.append((_floats(s), float(w or 1.0)))
    return parts


def build_model(cfg: dict) -> ModelSpec:
    m = cfg["model"]
    kind = m["kind"]
    try:
        if kind == "equal_mitosis":
            return make_equal_mitosis(_rate(m))
        if kind == "asymmetric_mitosis":
            return make_asymmetric_mitosis(_rate(m), _split(m))
        if kind == "parasite":
            return make_parasite(m["growth"], m["noise"], _rate(m), _split(m))
        if kind == "branching_ou":
            return make_branching_ou(m["d"], m["sigma"], m["g"], m["a"] if m["a"] is not None else 0.0,
                                     m["b"] if m["b"] is not None else 0.25)
        if kind == "fragmentation":
            return make_fragmentation(m["alpha"], _partitions(m["partitions"]))
    except InvalidModelError as exc:
        raise ConfigError(f"invalid model: {exc}") from exc
    raise ConfigError(f"unknown model kind {kind!r}")


def build_eigen(cfg: dict, model: ModelSpec):
    e = cfg["eigen"]
    try:
        if e["kind"] == "closed-form":
            if model.name == "fragmentation":
                return eigenpair_fragmentation(model, e["p"])
            return closed_form_eigenpair(model)
        if e["kind"] == "numeric":
            return eigenpair_numeric(model, e["x_max"], e["n_cells"])
        if e["kind"] == "none":
            return None
    except InvalidModelError as exc:
        raise ConfigError(f"eigen section: {exc}") from exc
    raise ConfigError(f"unknown eigen kind {e['kind']!r}")


def test_functions(names, eig=None) -> dict:
    lib = {
        "one": lambda x: np.ones(np.asarray(x).shape[0]),
        "x": lambda x: np.asarray(x, dtype=float),
        "x2": lambda x: np.asarray(x, dtype=float) ** 2,
        "exp_neg": lambda x: np.exp(-np.asarray(x, dtype=float)),
        "sin": lambda x: np.sin(np.asarray(x, dtype=float)),
    }
    if eig is not None:
        lib["x_over_V"] = lambda x: np.asarray(x, dtype=float) / eig.V(x)
    unknown = [n for n in names if n not in lib]
    if unknown:
        raise ConfigError(f"unknown test functions: {', '.join(unknown)}")
    return {n: lib[n] for n in names}


# ---------------------------------------------------------------------------
# output


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


class Context:
    def __init__(self, args: argparse.Namespace, cfg: dict):
        self.args = args
        self.cfg = cfg
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        if cfg["run"]["seed"] is None:
            raise ConfigError("a seed is mandatory ([run] seed or --seed)")
        if args.replicas is not None:
            cfg["run"]["replicas"] = args.replicas
        if args.jobs is not None:
            cfg["run"]["jobs"] = args.jobs
        out = args.out or cfg["output"]["dir"] or os.environ.get(OUT_ENV) or "branchspine_out"
        cfg["output"]["dir"] = out
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.reports: list[CheckReport] = []
        self.files: list[str] = []

    @property
    def seed(self) -> int:
        return int(self.cfg["run"]["seed"])

    @property
    def run(self) -> dict:
        return self.cfg["run"]

    @property
    def check(self) -> dict:
        return self.cfg["check"]

    def add(self, reps) -> None:
        reps = reps if isinstance(reps, list) else [reps]
        self.reports.extend(reps)
        if not self.args.quiet:
            for r in reps:
                print(r.line())

    def csv(self, name: str, header, rows) -> None:
        if "csv" in self.cfg["output"]["formats"]:
            write_csv(self.out / name, header, rows)
            self.files.append(name)

    def say(self, msg: str) -> None:
        if not self.args.quiet:
            print(msg)


# ---------------------------------------------------------------------------
# commands


def _model_eig(ctx: Context, need_eig: bool = True):
    model = build_model(ctx.cfg)
    eig = build_eigen(ctx.cfg, model) if need_eig else None
    if need_eig and eig is None:
        raise ConfigError("this command needs an eigenpair ([eigen] kind)")
    return model, eig


def cmd_simulate(ctx: Context) -> None:
    model = build_model(ctx.cfg)
    r = ctx.run
    snaps = r["snapshot_times"] or [r["T"]]
    cfg = SimConfig(T=r["T"], dt=r["dt"], max_particles=r["max_particles"], seed=ctx.seed, snapshot_times=snaps)
    x0 = r["x0"] if model.dim == 1 else [r["x0"]] * model.dim
    n = r["replicas"]

    def reduce(res):
        return np.stack([res.counts(t) for t in snaps], axis=1)

    counts = np.concatenate(run_replicas(model, [x0], cfg, n, reduce, jobs=r["jobs"]))
    rows = [(t, *mean_se(counts[:, i])) for i, t in enumerate(snaps)]
    ctx.csv("counts.csv", ["t", "mean_N", "stderr"], rows)
    for t, m, se in rows:
        ctx.say(f"t={t:g} E[N_t]={m:.6g} ± {se:.2g}")
    if ctx.cfg["output"]["tree_dump"]:
        res = simulate(model, [x0], cfg)
        res.to_csv(ctx.out / "tree.csv")
        ctx.files.append("tree.csv")


def cmd_nonexplosion(ctx: Context) -> None:
    """Bounded-rate growth bound N0 e^{(kbar-1) rbar T}; needs a bounded rate."""
    model = build_model(ctx.cfg)
    rate = model.params.get("rate")
    if isinstance(rate, ConstantRate):
        rbar = rate.r0
    elif isinstance(rate, PlateauRate):
        rbar = rate.r_inf
    else:
        raise ConfigError("the growth bound needs a constant or plateau rate")
    r = ctx.run
    cfg = SimConfig(T=r["T"], dt=r["dt"], max_particles=r["max_particles"], seed=ctx.seed,
                    snapshot_times=[r["T"]])
    counts = np.concatenate(run_replicas(model, [r["x0"]], cfg, r["replicas"],
                                         lambda res: res.counts(r["T"]), jobs=r["jobs"]))
    m, se = mean_se(counts)
    bound = growth_bound(1, model.kbar, rbar, r["T"])
    rep = make_report("nonexplosion_bound", m, se, bound, 0.0, ctx.seed, {"T": r["T"], "rbar": rbar})
    rep.passed = bool(m <= bound + 3 * se)
    ctx.add(rep)


def cmd_aux(ctx: Context) -> None:
    model, eig = _model_eig(ctx)
    c = ctx.check
    x0 = ctx.run["x0"] if model.dim == 1 else [ctx.run["x0"]] * model.dim
    mu = long_run_distribution(model, eig, x0, None, c["n_samples"], 0.5, ctx.seed)
    st = mu.states.reshape(len(mu), -1)
    ctx.csv("aux_samples.csv", ["y"] if st.shape[1] == 1 else [f"y_{i}" for i in range(st.shape[1])], st.tolist())
    ctx.say(f"{len(mu)} samples, mean {np.mean(st, axis=0)}")


def cmd_eigen(ctx: Context) -> None:
    model, eig = _model_eig(ctx)
    grid = np.linspace(0.05, 10.0, 21) if model.dim == 1 else np.zeros((1, model.dim))
    if model.name == "branching_ou":
        grid = np.linspace(-3, 3, 13) if model.dim == 1 else np.random.default_rng(0).normal(size=(20, model.dim))
    res = eigen_residual(model, eig, grid)
    rep = make_report(f"eigen_residual[{model.name}]", res, 0.0, 0.0, 0.0, ctx.seed,
                      {"lambda0": eig.lambda0}, allowance=1e-8)
    ctx.add(rep)


def cmd_mto(ctx: Context) -> None:
    model, eig = _model_eig(ctx)
    c = ctx.check
    fns = test_functions(c["functions"], eig)
    reps = mto_battery(model, eig, fns, ctx.run["x0"], c["times"], ctx.run["replicas"],
                       c["n_aux"] or ctx.run["replicas"], ctx.seed, dt=ctx.run["dt"], jobs=ctx.run["jobs"])
    ctx.add(reps)


def cmd_tree(ctx: Context) -> None:
    model, eig = _model_eig(ctx)
    c = ctx.check
    f = test_functions(c["functions"][:1], eig)
    g = next(iter(f.values()))
    rep = whole_tree_check(model, eig, lambda x, s: g(x), ctx.run["x0"], ctx.run["T"], ctx.run["replicas"],
                           c["quad_points"], ctx.seed, c["n_aux"], dt=ctx.run["dt"], jobs=ctx.run["jobs"])
    ctx.add(rep)


def cmd_fork(ctx: Context) -> None:
    model, eig = _model_eig(ctx)
    c = ctx.check
    f = next(iter(test_functions(c["functions"][:1], eig).values()))
    rep = fork_check(model, eig, f, f, ctx.run["x0"], ctx.run["T"], ctx.run["replicas"], c["quad_points"],
                     c["inner_replicas"], ctx.seed, outer_replicas=c["outer_replicas"], dt=ctx.run["dt"],
                     jobs=ctx.run["jobs"])
    ctx.add(rep)


def cmd_martingale(ctx: Context) -> None:
    model, eig = _model_eig(ctx)
    times = [0.0] + list(ctx.check["times"])
    ctx.add(martingale_check(model, eig, ctx.run["x0"], times, ctx.run["replicas"], ctx.seed,
                             dt=ctx.run["dt"], jobs=ctx.run["jobs"]))


def cmd_longtime(ctx: Context) -> None:
    model, eig = _model_eig(ctx)
    c = ctx.check
    g = next(iter(test_functions(c["functions"][:1], eig).values()))
    ctx.add(longtime_limit_check(model, eig, g, ctx.run["x0"], c["t_large"], ctx.run["replicas"], ctx.seed,
                                 n_pi=c["n_samples"], dt=ctx.run["dt"], jobs=ctx.run["jobs"]))


def cmd_moments(ctx: Context) -> None:
    a = ctx.args
    r = a.r if a.r is not None else ctx.cfg["model"]["r0"]
    x0 = a.x0 if a.x0 is not None else ctx.run["x0"]
    times = _floats(a.t) if a.t else [ctx.run["T"]]
    orders = [int(v) for v in _floats(a.orders)] if a.orders else [0, 1, 2]
    rows = [(m, t, float(closed_moment_tcp(m, r, x0, t))) for t in times for m in orders]
    ctx.csv("moments.csv", ["m", "t", "value"], rows)
    for m, t, v in rows:
        ctx.say(f"u_{m}({t:g}) = {v!r}")
    if "moments" in ctx.check["checks"] or a.command == "run":
        for t in times:
            ctx.add(moments_check(r, x0, t, [o for o in orders if o > 0], ctx.run["replicas"],
                                  sub_seed(ctx.seed, int(1000 * t)), jobs=ctx.run["jobs"]))


def cmd_yule(ctx: Context) -> None:
    r = ctx.cfg["model"]["r0"]
    ctx.add(yule_check(r, ctx.run["T"], ctx.run["replicas"], ctx.seed, jobs=ctx.run["jobs"]))


def cmd_density(ctx: Context) -> None:
    a = ctx.args
    r = a.r if a.r is not None else ctx.cfg["model"]["r0"]
    points = a.points or 100
    x_max = a.x_max or 10.0 / r
    x = np.linspace(0.0, x_max, points)
    d = tcp_invariant_density(x, r)
    ctx.csv("density.csv", ["x", "density"], zip(x, d))
    ctx.say(f"trapezoid integral over [0, {x_max:g}] = {np.trapezoid(d, x):.8f}")
    model = make_equal_mitosis(ConstantRate(r))
    eig = closed_form_eigenpair(model)
    mu = long_run_distribution(model, eig, [1.0 / r], None, ctx.check["n_samples"], 0.5, ctx.seed)
    ks = ks_distance(mu.states, lambda y: tcp_invariant_cdf(y, r))
    ctx.add(make_report("tcp_density_ks", ks, 0.0, 0.0, 0.0, ctx.seed, {"r": r, "n": len(mu)},
                        allowance=ctx.check["ks_max"]))


def cmd_couple(ctx: Context) -> None:
    a = ctx.args
    r = a.r if a.r is not None else ctx.cfg["model"]["r0"]
    x = a.x if a.x is not None else 1.0
    y = a.y if a.y is not None else 3.0
    T = a.T if a.T is not None else ctx.run["T"]
    times = _floats(a.times) if a.times else sorted(set([T / 4, T / 2, T]))
    model = make_equal_mitosis(ConstantRate(r))
    cfg = SimConfig(T=T, seed=ctx.seed, snapshot_times=times, max_particles=ctx.run["max_particles"])
    res = coupled_mitosis_simulate(model, x, y, cfg, ctx.run["replicas"])
    rows = []
    for t in times:
        disp = res.displacement[t]
        w = res.wasserstein[t] / math.exp(r * t)
        m, se = mean_se(w)
        bound = abs(x - y) * math.exp(-r * t)
        rows.append((t, float(disp.mean()), float(np.max(np.abs(disp - abs(x - y)))), m, se, bound))
        err = float(np.max(np.abs(disp - abs(x - y))))
        rep = make_report(f"coupling_displacement[t={t:g}]", err, 0.0, 0.0, 0.0, ctx.seed,
                          {"x": x, "y": y, "r": r}, allowance=1e-12)
        ctx.add(rep)
        rep = make_report(f"coupling_w1[t={t:g}]", m, se, bound, 0.0, ctx.seed, {"x": x, "y": y, "r": r})
        rep.passed = bool(m <= bound * (1 + 1e-9) + 3 * se)
        ctx.add(rep)
    ctx.csv("coupling.csv", ["t", "displacement", "displacement_max_error", "w1_normalised", "w1_stderr",
                             "w1_bound"], rows)


def _gamma_init(mean: float, shape: float = 4.0):
    """Gamma(shape) initial law with the given mean: (density, sampler)."""
    from scipy import stats

    law = stats.gamma(shape, scale=mean / shape)
    return law.pdf, (lambda rng, n: rng.gamma(shape, mean / shape, n))


def cmd_pde(ctx: Context) -> None:
    model = build_model(ctx.cfg)
    grid = pde.Grid(ctx.check["x_max"], ctx.check["n_cells"])
    dens, _ = _gamma_init(ctx.run["x0"])
    try:
        init = pde.pde_init(grid, dens)
        times = ctx.run["snapshot_times"] or [ctx.run["T"]]
        traj = pde.pde_solve(model, init, ctx.run["T"], times=times)
    except InvalidModelError as exc:
        raise ConfigError(str(exc)) from exc
    manifest = []
    for t, st in zip(traj.times, traj.states):
        name = f"density_t{t:g}.csv"
        if "csv" in ctx.cfg["output"]["formats"]:
            st.to_csv(ctx.out / name)
            ctx.files.append(name)
        manifest.append({"t": float(t), "file": name, "mass": st.mass(), "clipped_mass": st.clipped_mass,
                         "outflow": st.outflow})
    (ctx.out / "trajectory.json").write_text(json.dumps(manifest, indent=2) + "\n")
    ctx.files.append("trajectory.json")
    ctx.say(f"solved to t={ctx.run['T']:g}; final mass {traj.states[-1].mass():.6g}")


def cmd_macro(ctx: Context) -> None:
    model = build_model(ctx.cfg)
    c = ctx.check
    dens, sampler = _gamma_init(ctx.run["x0"])
    try:
        reps = macroscopic_check(model, dens, sampler, c["n_scale"], ctx.run["T"],
                                 pde.Grid(c["x_max"], c["n_cells"]), ctx.seed, dt=ctx.run["dt"])
    except InvalidModelError as exc:
        raise ConfigError(str(exc)) from exc
    ctx.add(reps)
    ctx.csv("macro.csv", ["f", "particles", "pde", "relative_error"],
            [(r.name, r.lhs, r.rhs, r.extra["relative_error"]) for r in reps])


def cmd_ou(ctx: Context) -> None:
    m = ctx.cfg["model"]
    if m["kind"] != "branching_ou":
        ctx.cfg["model"]["kind"] = "branching_ou"
    model, eig = _model_eig(ctx)
    p = model.params
    T = ctx.run["T"]
    x0 = ctx.run["x0"]
    init = [x0] if model.dim == 1 else [[x0] * model.dim]
    cf = ou_closed_forms(p["g"], p["sigma"], p["a"], p["b"], T, np.full(model.dim, x0), model.dim)
    cfg = SimConfig(T=T, dt=ctx.run["dt"], seed=ctx.seed, snapshot_times=[T], max_particles=ctx.run["max_particles"])
    counts = np.concatenate(run_replicas(model, init, cfg, ctx.run["replicas"], lambda res: res.counts(T),
                                         jobs=ctx.run["jobs"]))
    mc, se = mean_se(counts)
    ctx.add(make_report("ou_mean_population", mc, se, cf.mean_population, 0.0, ctx.seed,
                        {"T": T, "x0": x0, "quadrature": cf.mean_population_quad}))
    ctx.csv("ou_closed_forms.csv", ["Gamma", "alpha", "lambda", "mean_population", "limit_variance"],
            [(cf.Gamma, cf.alpha, cf.lam, cf.mean_population, cf.limit_variance)])
    if model.dim == 1 and ctx.check["t_large"] > 0 and "ou" in ctx.check["checks"]:
        tl = ctx.check["t_large"]
        cfg = SimConfig(T=tl, dt=ctx.run["dt"], seed=sub_seed(ctx.seed, 1), snapshot_times=[tl],
                        max_particles=ctx.run["max_particles"])
        parts = run_replicas(model, init, cfg, ctx.run["replicas"], lambda res: res.snapshot(tl).states,
                             jobs=ctx.run["jobs"])
        pooled = np.concatenate(parts)
        ks = ks_distance(pooled, cf.limit_cdf)
        lit = ks_distance(pooled, ou_literal_limit_cdf(p["g"], p["sigma"], p["b"]))
        ctx.add(make_report("ou_limit_ks", ks, 0.0, 0.0, 0.0, ctx.seed,
                            {"t": tl, "n": int(pooled.size)}, allowance=0.05, extra={"ks_plus_sign": lit}))


def cmd_frag(ctx: Context) -> None:
    m = ctx.cfg["model"]
    if m["kind"] != "fragmentation":
        raise ConfigError("frag needs [model] kind = fragmentation")
    model, eig = _model_eig(ctx)
    r = ctx.run
    cfg = SimConfig(T=r["T"], seed=ctx.seed, snapshot_times=[r["T"]], max_particles=r["max_particles"])
    x0 = r["x0"]

    def reduce(res):
        return np.stack([res.functional(r["T"], lambda x: x), res.functional(r["T"], eig.V)], axis=1)

    vals = np.concatenate(run_replicas(model, [x0], cfg, r["replicas"], reduce, jobs=r["jobs"]))
    conservative = all(abs(sum(s) - 1.0) < 1e-12 for s, _ in model.params["partitions"])
    if conservative:
        err = float(np.max(np.abs(vals[:, 0] - x0)))
        ctx.add(make_report("frag_mass_conservation", err, 0.0, 0.0, 0.0, ctx.seed, {}, allowance=1e-9 * x0))
    mean_v, se = mean_se(vals[:, 1])
    target = float(eig.V(np.array([x0]))[0]) * math.exp(eig.lambda0 * r["T"])
    ctx.add(make_report("frag_mean_growth", mean_v, se, target, 0.0, ctx.seed, {"lambda0": eig.lambda0}))


def cmd_clt(ctx: Context) -> None:
    model = build_model(ctx.cfg)
    c = ctx.check
    T, n = ctx.run["T"], c["n_scale"]
    x0 = ctx.run["x0"]
    grid = pde.Grid(c["x_max"], c["n_cells"])
    dens = lambda x: np.where(np.asarray(x) <= 2 * x0, 1.0 / (2 * x0), 0.0)  # noqa: E731
    init = pde.pde_init(grid, dens)
    sol = pde.bracket_solution(model, grid, lambda x: np.asarray(x, dtype=float), init, T)
    rep = variance_bracket_check(model, lambda x: np.asarray(x, dtype=float), n, T, ctx.run["replicas"], sol,
                                 ctx.seed, init_sampler=lambda rng, k: rng.uniform(0, 2 * x0, k),
                                 jobs=ctx.run["jobs"])
    ctx.add(rep)


COMMANDS = {
    "simulate": cmd_simulate,
    "aux": cmd_aux,
    "mto": cmd_mto,
    "tree": cmd_tree,
    "fork": cmd_fork,
    "moments": cmd_moments,
    "density": cmd_density,
    "couple": cmd_couple,
    "pde": cmd_pde,
    "macro": cmd_macro,
    "ou": cmd_ou,
    "frag": cmd_frag,
    "clt": cmd_clt,
}

COMMAND_HELP = {
    "simulate": "simulate the population and dump mean counts (and optionally one tree)",
    "aux": "sample the long-run law of the spine process",
    "mto": "weighted many-to-one battery, population versus spine",
    "tree": "many-to-one identity summed over the whole tree",
    "fork": "many-to-one identity for pairs of distinct particles",
    "moments": "closed-form size moments for constant-rate equal mitosis",
    "density": "invariant size density for constant-rate equal mitosis",
    "couple": "same-tree coupling of two mitosis populations",
    "pde": "solve the mean-measure PDE and dump densities",
    "macro": "large-population system against the PDE",
    "ou": "branching Ornstein-Uhlenbeck mean population and limit law",
    "frag": "fragmentation mass conservation and mean growth",
    "clt": "fluctuation variance against the bracket integral",
}

RUN_CHECKS = {
    "simulate": cmd_simulate,
    "eigen": cmd_eigen,
    "mto": cmd_mto,
    "tree": cmd_tree,
    "fork": cmd_fork,
    "martingale": cmd_martingale,
    "longtime": cmd_longtime,
    "moments": cmd_moments,
    "yule": cmd_yule,
    "density": cmd_density,
    "couple": cmd_couple,
    "nonexplosion": cmd_nonexplosion,
    "ou": cmd_ou,
    "frag": cmd_frag,
    "clt": cmd_clt,
    "macro": cmd_macro,
}


def cmd_run(ctx: Context) -> None:
    for name in ctx.check["checks"]:
        RUN_CHECKS[name](ctx)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", help="output directory (default: $%s or ./branchspine_out)" % OUT_ENV)
    common.add_argument("--replicas", type=int, help="override [run] replicas")
    common.add_argument("--jobs", type=int, help="parallel worker processes")
    common.add_argument("--quiet", action="store_true", help="suppress console output")
    p = argparse.ArgumentParser(prog="branchspine", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run the checks listed in the config")
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=COMMAND_HELP[name])
        if name in ("moments", "density", "couple"):
            sp.add_argument("--r", type=float)
        if name == "moments":
            sp.add_argument("--x0", type=float)
            sp.add_argument("--t", help="comma-separated times")
            sp.add_argument("--orders", help="comma-separated orders")
        if name == "density":
            sp.add_argument("--points", type=int)
            sp.add_argument("--x-max", type=float, dest="x_max")
        if name == "couple":
            sp.add_argument("--x", type=float)
            sp.add_argument("--y", type=float)
            sp.add_argument("--T", type=float)
            sp.add_argument("--times", help="comma-separated snapshot times")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for attr in ("r", "x0", "t", "orders", "points", "x_max", "x", "y", "T", "times"):
        if not hasattr(args, attr):
            setattr(args, attr, None)
    start = time.time()
    ctx = None
    code = EXIT_OK
    try:
        if args.command == "run" and not args.config:
            raise ConfigError("run needs --config")
        cfg = load_config(args.config)
        if args.command != "run" and args.config is None and args.seed is None:
            cfg["run"]["seed"] = 0
        ctx = Context(args, cfg)
        (cmd_run if args.command == "run" else COMMANDS[args.command])(ctx)
        if any(not r.passed for r in ctx.reports):
            code = EXIT_FAIL
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExplosionError as exc:
        print(f"explosion guard: {exc}", file=sys.stderr)
        code = EXIT_EXPLOSION
    if ctx is not None:
        results = [r.to_json() for r in ctx.reports]
        (ctx.out / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
        manifest = {
            "command": args.command,
            "config": ctx.cfg,
            "version": __version__,
            "wall_time_s": time.time() - start,
            "exit_code": code,
            "files": ctx.files,
        }
        (ctx.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
