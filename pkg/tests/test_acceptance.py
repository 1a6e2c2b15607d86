"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``.  Every criterion draws its
randomness from sub_seed(SEED, criterion), with SEED fixed before any run.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, stats

from branchspine import cli, pde
from branchspine.auxiliary import long_run_distribution
from branchspine.branching_sim import ExplosionError, SimConfig, run_replicas, simulate
from branchspine.estimators import (
    closed_moment_tcp, fork_check, fork_closed_constant, growth_bound, ks_distance, longtime_limit_check,
    macroscopic_check, make_report, mean_se, moment_m1_display, moments_check, mto_battery, sub_seed,
    tcp_invariant_cdf, tcp_invariant_density, tcp_invariant_mean, tcp_profile_check, variance_bracket_check,
    whole_tree_check, yule_check,
)
from branchspine.model_zoo import (
    AffineRate, ConstantRate, PlateauRate, PowerRate, beta_split, closed_form_eigenpair, eigen_residual,
    eigenpair_affine_mitosis, eigenpair_constant, eigenpair_fragmentation, eigenpair_ou,
    eigenpair_parasite_affine, eigenpair_parasite_linear, equal_split, make_asymmetric_mitosis,
    make_branching_ou, make_equal_mitosis, make_fragmentation, make_parasite, uniform_split,
)

SEED = 20261015
CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def ident(x):
    return np.asarray(x, dtype=float)


BATTERY = {
    "one": lambda x: np.ones(np.asarray(x).shape[0]),
    "x": ident,
    "exp_neg": lambda x: np.exp(-ident(x)),
    "sin": lambda x: np.sin(ident(x)),
}


class Item:
    """Uniform view of a CheckReport or a results.json entry."""

    def __init__(self, line: str, passed: bool):
        self.line, self.passed = line, bool(passed)

    @classmethod
    def of(cls, rep):
        return cls(rep.line(), rep.passed)

    @classmethod
    def from_json(cls, d):
        # non-finite floats are stored as strings
        v = {k: float(d[k]) for k in ("lhs", "lhs_stderr", "rhs", "z")}
        flag = "PASS" if d["pass"] else "FAIL"
        return cls(f"{flag} {d['name']}: lhs={v['lhs']:.6g}±{v['lhs_stderr']:.2g} rhs={v['rhs']:.6g} "
                   f"z={v['z']:.3g}", d["pass"])


@pytest.fixture
def verdict(capsys):
    def emit(n: int, items, summary: str = ""):
        items = [it if isinstance(it, Item) else Item.of(it) for it in items]
        ok = bool(items) and all(it.passed for it in items)
        with capsys.disabled():
            print()
            print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {summary}")
            for it in items:
                print("    " + it.line)
        failed = [it.line for it in items if not it.passed]
        assert ok, f"criterion {n} failed: {failed}"

    return emit


def flag(name: str, ok: bool, detail: str) -> Item:
    return Item(f"{'PASS' if ok else 'FAIL'} {name}: {detail}", ok)


def run_cli(args, out):
    code = cli.main(list(args) + ["--out", str(out), "--quiet"])
    reps = json.loads((Path(out) / "results.json").read_text())
    return code, reps


# ---------------------------------------------------------------------------


def test_criterion_01_eigen_residuals(verdict):
    t0 = time.perf_counter()
    pos = np.linspace(0.0, 10.0, 41)
    inner = np.linspace(0.1, 10.0, 30)
    cases = []
    m = make_equal_mitosis(ConstantRate(1.0))
    cases.append(("constant", m, eigenpair_constant(m), pos))
    for split in (equal_split(), uniform_split()):
        m = make_asymmetric_mitosis(AffineRate(1.0, 0.5), split)
        cases.append((f"affine[{split.name}]", m, eigenpair_affine_mitosis(1.0, 0.5), pos))
    m = make_parasite(0.7, 0.3, AffineRate(0.4, 1.2), uniform_split())
    cases.append(("parasite_linear", m, eigenpair_parasite_linear(0.7), inner))
    cases.append(("parasite_affine", m, eigenpair_parasite_affine(0.7, 0.4, 1.2), inner))
    cases.append(("ou_1d", make_branching_ou(1, 1.0, 1.0, 0.0, 0.25), eigenpair_ou(1, 1.0, 1.0, 0.0, 0.25),
                  np.linspace(-3.0, 3.0, 25)))
    cases.append(("ou_2d", make_branching_ou(2, 0.8, 1.2, 0.3, 0.2), eigenpair_ou(2, 0.8, 1.2, 0.3, 0.2),
                  np.random.default_rng(sub_seed(SEED, 1)).normal(size=(40, 2))))
    m = make_fragmentation(0.0, [((0.6, 0.4), 1.0), ((0.5, 0.3, 0.2), 0.5)])
    cases.append(("fragmentation_p2", m, eigenpair_fragmentation(m, 2.0), np.linspace(0.1, 5.0, 20)))
    items = []
    for name, model, eig, grid in cases:
        res = eigen_residual(model, eig, grid)
        items.append(flag(f"residual[{name}]", res < 1e-8, f"{res:.3g} (lambda0={eig.lambda0:.6g})"))
    elapsed = time.perf_counter() - t0
    items.append(flag("runtime", elapsed < 1.0, f"{elapsed:.3f} s < 1 s"))
    verdict(1, items, "eigen residuals < 1e-8")


def test_criterion_02_weighted_many_to_one(verdict):
    t0 = time.perf_counter()
    reps = []
    models = [make_equal_mitosis(ConstantRate(1.0)),
              make_asymmetric_mitosis(AffineRate(1.0, 0.5), uniform_split())]
    for i, m in enumerate(models):
        reps += mto_battery(m, closed_form_eigenpair(m), BATTERY, 1.0, [0.5, 1.0, 2.0], 100_000, 100_000,
                            sub_seed(SEED, 20 + i))
    elapsed = time.perf_counter() - t0
    items = [Item.of(r) for r in reps]
    items.append(flag("runtime", elapsed < 300, f"{elapsed:.1f} s < 300 s"))
    verdict(2, items, f"{len(reps)} (model, f, t) cells, max z={max(r.z for r in reps):.2f}")


def test_criterion_03_moments(verdict):
    t0 = time.perf_counter()
    reps = []
    for x0 in (0.0, 1.0):
        for t in (0.5, 1.0):
            reps += moments_check(1.0, x0, t, [1, 2], 100_000, sub_seed(SEED, 30 + int(10 * x0 + 2 * t)))
    items = [Item.of(r) for r in reps]
    ts = np.linspace(0.0, 3.0, 31)
    for x0 in (0.0, 1.0, 2.5):
        err = float(np.max(np.abs(closed_moment_tcp(1, 1.0, x0, ts) - moment_m1_display(1.0, x0, ts))))
        items.append(flag(f"m1_display[x0={x0:g}]", err < 1e-12, f"max abs diff {err:.2g}"))
    elapsed = time.perf_counter() - t0
    items.append(flag("runtime", elapsed < 120, f"{elapsed:.1f} s < 120 s"))
    verdict(3, items, "first and second moments against the closed recursion")


def test_criterion_04_yule(verdict):
    reps = yule_check(1.0, 1.0, 100_000, sub_seed(SEED, 4))
    verdict(4, reps, "N_1 ~ geometric(e^-1)")


def test_criterion_05_coupling(verdict, tmp_path):
    code, reps = run_cli(["couple", "--x", "1", "--y", "3", "--r", "1", "--T", "2", "--times", "0.5,1,2",
                          "--replicas", "10000", "--seed", str(sub_seed(SEED, 5))], tmp_path)
    items = [Item.from_json(d) for d in reps]
    items.append(flag("exit_code", code == 0, str(code)))
    verdict(5, items, "displacement identity and W1 contraction")


def test_criterion_06_invariant_density(verdict):
    r = 1.0
    mass = integrate.quad(lambda x: tcp_invariant_density(x, r), 0, np.inf, limit=200)[0]
    mean = integrate.quad(lambda x: x * tcp_invariant_density(x, r), 0, np.inf, limit=200)[0]
    items = [flag("mass", abs(mass - 1) < 1e-8, f"{mass!r}"),
             flag("mean", abs(mean - 1 / r) < 1e-8, f"{mean!r} vs {1 / r}"),
             flag("closed_mean", abs(tcp_invariant_mean(r) - 1 / r) < 1e-8, f"{tcp_invariant_mean(r)!r}")]
    m = make_equal_mitosis(ConstantRate(r))
    mu = long_run_distribution(m, eigenpair_constant(m), [1.0], None, 100_000, 0.5, sub_seed(SEED, 6))
    ks = ks_distance(mu.states, lambda y: tcp_invariant_cdf(y, r))
    items.append(flag("ks", ks < 0.02 and len(mu) == 100_000, f"KS={ks:.4f} < 0.02 on {len(mu)} samples"))
    verdict(6, items, "series density and spine long-run law")


def test_criterion_07_long_time_limit(verdict):
    m = make_equal_mitosis(ConstantRate(1.0))
    const = longtime_limit_check(m, eigenpair_constant(m), ident, 1.0, 12.0, 20, sub_seed(SEED, 70),
                                 allowance=0.01, target=tcp_invariant_mean(1.0))
    m = make_asymmetric_mitosis(AffineRate(0.25, 0.5), uniform_split())
    eig = closed_form_eigenpair(m)
    c = float(eig.grad_V(np.array([0.0]))[0])
    aff = longtime_limit_check(m, eig, lambda x: ident(x) / (c * ident(x) + 1), 1.0, 12.0, 20,
                               sub_seed(SEED, 71), n_pi=100_000)
    verdict(7, [const, aff], "population averages at t=12 against the limit law")


def test_criterion_08_tree_and_fork(verdict):
    items = []
    m = make_equal_mitosis(ConstantRate(1.0))
    e = eigenpair_constant(m)
    one2 = lambda x, s: np.ones(np.asarray(x).shape[0])  # noqa: E731
    tree = whole_tree_check(m, e, one2, 1.0, 2.0, 100_000, 17, sub_seed(SEED, 80))
    items.append(Item.of(tree))
    items.append(Item.of(make_report("whole_tree_closed", tree.lhs, tree.lhs_stderr, math.expm1(2.0), 0.0,
                                     SEED, {})))
    one = BATTERY["one"]
    fork = fork_check(m, e, one, one, 1.0, 1.0, 100_000, 17, 100, sub_seed(SEED, 81))
    items.append(Item.of(fork))
    items.append(Item.of(make_report("fork_closed", fork.lhs, fork.lhs_stderr, fork_closed_constant(1.0, 1.0),
                                     0.0, SEED, {})))
    m = make_asymmetric_mitosis(AffineRate(1.0, 0.5), uniform_split())
    e = closed_form_eigenpair(m)
    items.append(Item.of(whole_tree_check(m, e, lambda x, s: np.exp(-ident(x) - s), 1.0, 1.5, 100_000, 17,
                                          sub_seed(SEED, 82))))
    items.append(Item.of(fork_check(m, e, ident, BATTERY["exp_neg"], 1.0, 0.75, 100_000, 17, 100,
                                    sub_seed(SEED, 83))))
    verdict(8, items, "whole-tree and fork identities")


def test_criterion_09_macroscopic_limit(verdict):
    m = make_equal_mitosis(ConstantRate(1.0))
    law = stats.gamma(4.0, scale=0.25)
    reps = macroscopic_check(m, law.pdf, lambda rng, n: rng.gamma(4.0, 0.25, n), 10_000, 1.0,
                             pde.Grid(20.0, 4096), sub_seed(SEED, 9))
    items = [Item(r.line() + f" rel_err={r.extra['relative_error']:.4f}", r.passed) for r in reps]
    items.append(Item.of(tcp_profile_check(1.0, pde.Grid(20.0, 1024), 15.0)))
    verdict(9, items, "n=1e4 system against the mean PDE; long-time profile")


def test_criterion_10_pde_kernel_and_refinement(verdict):
    items = []
    for m in (make_asymmetric_mitosis(AffineRate(1.0, 0.5), uniform_split()),
              make_asymmetric_mitosis(ConstantRate(1.0), beta_split(2.0))):
        g = pde.Grid(10.0, 512)
        props = pde.kernel_properties(m, g, [1.0, 2.5, 5.0, 7.5])
        props.update({"matrix_" + k: v for k, v in pde.kernel_matrix_properties(m, g).items()})
        worst = max(props.values())
        items.append(flag(f"kernel[{m.params['split']}]", worst < 1e-6, f"max {worst:.2g}"))
    m = make_asymmetric_mitosis(AffineRate(1.0, 0.5), uniform_split())
    study = pde.refinement_study(m, lambda x: np.exp(-((x - 2.0) ** 2) / 0.5), 1.0, 10.0, [256, 512, 1024, 2048])
    for n, ratio in zip(study["n_cells"][2:], study["ratios"]):
        items.append(flag(f"refinement[{n}]", ratio >= 1.7, f"L1 contraction {ratio:.3f} >= 1.7"))
    verdict(10, items, "discrete kernel identities and grid refinement")


def test_criterion_11_fluctuation_variance(verdict):
    items = []
    x0 = 1.0
    grid = pde.Grid(20.0, 1024)
    init = pde.pde_init(grid, lambda x: np.where(np.asarray(x) <= 2 * x0, 0.5 / x0, 0.0))
    for i, (rate, reps) in enumerate([(ConstantRate(1.0), 500), (AffineRate(1.0, 0.5), 2000)]):
        m = make_asymmetric_mitosis(rate, uniform_split())
        sol = pde.bracket_solution(m, grid, ident, init, 1.0)
        rep = variance_bracket_check(m, ident, 10_000, 1.0, reps, sol, sub_seed(SEED, 110 + i),
                                     init_sampler=lambda rng, k: rng.uniform(0, 2 * x0, k))
        rel = abs(rep.lhs - rep.rhs) / rep.rhs
        items.append(Item(rep.line() + f" rel_err={rel:.3f} replicas={reps}", rep.passed))
    verdict(11, items, "n Var(X_t(id)) against the bracket, 10% + 3 stderr")


def test_criterion_12_branching_ou(verdict, tmp_path):
    code, reps = run_cli(["run", "--config", str(CONFIGS / "ou.cfg"), "--seed", str(sub_seed(SEED, 12))],
                         tmp_path)
    items = [Item.from_json(d) for d in reps]
    items.append(flag("exit_code", code == 0, str(code)))
    verdict(12, items, "E[N_1] closed form and limit law KS at t=8")


def test_criterion_13_non_explosion(verdict, tmp_path):
    items = []
    cases = [("constant", make_equal_mitosis(ConstantRate(1.0)), 1.0, 2.0),
             ("plateau", make_asymmetric_mitosis(PlateauRate(1.0, 1.0, 3.0), uniform_split()), 3.0, 1.0)]
    for i, (name, m, rbar, T) in enumerate(cases):
        cfg = SimConfig(T=T, seed=sub_seed(SEED, 130 + i), snapshot_times=[T])
        counts = np.concatenate(run_replicas(m, [1.0], cfg, 20_000, lambda res: res.counts(T)))
        mc, se = mean_se(counts)
        bound = growth_bound(1, m.kbar, rbar, T)
        items.append(flag(f"growth_bound[{name}]", mc <= bound + 3 * se,
                          f"E[N_T]={mc:.4g}±{se:.2g} <= {bound:.4g}"))
    with pytest.raises(ExplosionError) as exc:
        simulate(make_equal_mitosis(PowerRate(1.0, 2.0)), [4.0], SimConfig(T=5.0, seed=3, max_particles=50))
    items.append(flag("guard_api", exc.value.partial is not None, "ExplosionError carries the partial tree"))
    code = cli.main(["run", "--config", str(CONFIGS / "explosion.cfg"), "--out", str(tmp_path), "--quiet"])
    items.append(flag("guard_cli", code == 2, f"exit code {code}"))
    verdict(13, items, "bounded-rate growth bound and explosion guard")
