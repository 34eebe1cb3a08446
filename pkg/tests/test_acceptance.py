"""Exit criteria for the package, one test per criterion.

Each test records a ``PASS``/``FAIL`` line that is echoed in the terminal
summary (see ``conftest.py``). Tolerances are pinned as module constants.
Run only these with ``pytest -m acceptance``.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from mcmcsgd.chain_core import (
    Distribution,
    FiniteKernel,
    build_mh_kernel,
    chi_squared_divergence,
    exact_pi,
    spectral_gap,
)
from mcmcsgd.cli import main
from mcmcsgd.concentration import (
    ChainConstants,
    cnc_check,
    second_moment_check,
    tail_bound_check,
    tail_threshold,
)
from mcmcsgd.estimators import (
    assumption_audit,
    exact_gradient,
    exact_hessian,
    exact_objective,
    measure_bias_variance,
)
from mcmcsgd.optimizer import Schedule, derive_table1, escape_experiment, sgd_run
from mcmcsgd.problems import (
    DiscreteViSpec,
    EntropyBanditSpec,
    IsingVmcSpec,
    build_discrete_vi,
    build_entropy_bandit,
    build_ising,
    find_saddle,
    ring_template,
)
from mcmcsgd.sampling import SamplerConfig

from .conftest import two_state
from .oracles import fd_gradient, fd_hessian, loglog_slope, rel_err

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

GRAD_TOL = 1e-6
HESS_TOL = 1e-5
SCORE_TOL = 1e-10
STATIONARY_TOL = 1e-10
BALANCE_TOL = 1e-12
GAP_TOL = 1e-10
SLOPE_RANGE = (-1.3, -0.7)
N_SE = 3.0
BIAS_N_SE = 2.0
ESCAPE_SUCCESS = 0.8
VMC_REL_TOL = 0.05
VMC_FLOOR_TOL = 1e-9

BANDIT_REWARDS = (1.0, 0.5, 0.0, -0.5, -1.0)


def record(report, criterion: int, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
    report.append(line)
    print(line)


def _families(rng):
    """Five random instances from each of the four problem families."""
    out = []
    for i in range(5):
        out.append(build_ising(IsingVmcSpec(sites=3 + i % 2, J=rng.uniform(0.5, 1.5),
                                            h=rng.uniform(0.5, 1.5))))
        out.append(build_entropy_bandit(EntropyBanditSpec(tuple(rng.normal(size=4 + i)),
                                                          rng.uniform(0.2, 2.0))))
        target = rng.dirichlet(np.ones(3 + i))
        out.append(build_discrete_vi(DiscreteViSpec(tuple(target))))
        out.append(ring_template(states=4 + i, amplitude=rng.uniform(0.5, 1.5)).build())
    return [(p, rng.normal(scale=0.7, size=p.dim)) for p in out]


def test_criterion_1_oracle_consistency(acceptance_report):
    start = time.perf_counter()
    instances = _families(np.random.default_rng(2024))
    worst = {"grad": 0.0, "hess": 0.0, "score": 0.0}
    for problem, theta in instances:
        worst["grad"] = max(worst["grad"], rel_err(fd_gradient(problem, theta),
                                                   exact_gradient(problem, theta)))
        worst["hess"] = max(worst["hess"], rel_err(fd_hessian(problem, theta),
                                                   exact_hessian(problem, theta).hessian))
        pi = exact_pi(problem, theta).weights
        worst["score"] = max(worst["score"],
                             float(np.abs(pi @ problem.grad_f(theta)).max()))
    elapsed = time.perf_counter() - start
    ok = (worst["grad"] <= GRAD_TOL and worst["hess"] <= HESS_TOL
          and worst["score"] <= SCORE_TOL and elapsed < 30)
    record(acceptance_report, 1, ok,
           f"{len(instances)} instances, grad {worst['grad']:.2e}, hess {worst['hess']:.2e}, "
           f"E[grad f] {worst['score']:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_mh_correctness(acceptance_report):
    start = time.perf_counter()
    worst_stat = worst_bal = 0.0
    for problem, theta in _families(np.random.default_rng(7)):
        kernel = build_mh_kernel(problem, theta, problem.proposal())
        pi = exact_pi(problem, theta).weights
        flow = pi[:, None] * kernel.rows
        worst_stat = max(worst_stat, float(np.abs(pi @ kernel.rows - pi).sum()))
        worst_bal = max(worst_bal, float(np.abs(flow - flow.T).max()))
    worst_gap = 0.0
    grid = np.linspace(0.05, 0.95, 5)
    pairs = [(p, q) for p in grid for q in grid if p + q <= 1.0][:20]
    pairs += [(p, 1.0 - p) for p in np.linspace(0.1, 0.4, 20 - len(pairs))]
    for p, q in pairs:
        K = two_state(p, q)
        pi = Distribution(K.space, np.array([q, p]) / (p + q))
        worst_gap = max(worst_gap, abs(spectral_gap(K, pi).gamma - (p + q)))
    elapsed = time.perf_counter() - start
    ok = (worst_stat <= STATIONARY_TOL and worst_bal <= BALANCE_TOL and worst_gap <= GAP_TOL
          and len(pairs) == 20 and elapsed < 10)
    record(acceptance_report, 2, ok,
           f"|pi P - pi|_1 {worst_stat:.1e}, balance {worst_bal:.1e}, "
           f"gap error {worst_gap:.1e} over {len(pairs)} (p, q), {elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def ising_sweep():
    """Bias and mean-squared error of the gradient estimator on 3-site Ising."""
    start = time.perf_counter()
    problem = build_ising(IsingVmcSpec(sites=3))
    theta = np.array([0.3, -0.2, 0.1, 0.2, -0.1])
    pi = exact_pi(problem, theta)
    kernel = build_mh_kernel(problem, theta, problem.proposal())
    gamma = spectral_gap(kernel, pi).gamma
    start_state = Distribution.point_mass(problem.space, int(np.argmin(pi.weights)))
    burn = math.ceil(10 / gamma)
    cold, warm = [], []
    for n in (16, 64, 256, 1024):
        cfg = SamplerConfig(n=n, n0=0, initial=start_state, seed=1)
        cold.append(measure_bias_variance(problem, theta, kernel, cfg, 20_000))
        warm.append(measure_bias_variance(problem, theta, kernel, cfg.with_(n0=burn, seed=2),
                                          20_000))
    return {"cold": cold, "warm": warm, "burn": burn, "gamma": gamma,
            "elapsed": time.perf_counter() - start}


def test_criterion_3_bias_scaling(acceptance_report, ising_sweep):
    cold, warm = ising_sweep["cold"], ising_sweep["warm"]
    ns = [m.n for m in cold]
    slope = loglog_slope(ns, [m.bias_norm for m in cold])
    burn_ok = all(
        w.bias_norm <= c.bias_norm + BIAS_N_SE * math.hypot(c.bias_norm_se, w.bias_norm_se)
        for c, w in zip(cold, warm))
    ok = SLOPE_RANGE[0] <= slope <= SLOPE_RANGE[1] and burn_ok and ising_sweep["elapsed"] < 300
    record(acceptance_report, 3, ok,
           f"bias slope {slope:.3f}, n0={ising_sweep['burn']} bias "
           + ", ".join(f"{w.bias_norm:.2e}<={c.bias_norm:.2e}" for c, w in zip(cold, warm))
           + f", {ising_sweep['elapsed']:.1f}s")
    assert ok


def test_criterion_4_variance_scaling(acceptance_report, ising_sweep):
    cold = ising_sweep["cold"]
    slope = loglog_slope([m.n for m in cold], [m.mse for m in cold])
    below = all(m.mse - N_SE * m.mse_se <= m.bound_var for m in cold + ising_sweep["warm"])
    ok = SLOPE_RANGE[0] <= slope <= SLOPE_RANGE[1] and below
    record(acceptance_report, 4, ok,
           f"MSE slope {slope:.3f}, max MSE/V ratio "
           f"{max(m.mse / m.bound_var for m in cold):.2e}")
    assert ok


HALF_FLIP = FiniteKernel.from_matrix([[0.75, 0.25], [0.25, 0.75]])
SIGNS = np.array([1.0, -1.0])


def test_criterion_5_tail_bound(acceptance_report):
    start = time.perf_counter()
    pi = Distribution.uniform(HALF_FLIP.space)
    n = 512
    thr = tail_threshold(n, ChainConstants.compute(HALF_FLIP, pi, SIGNS, 0.0).M)
    grid = np.linspace(1.01 * thr, 3.0 * thr, 10)
    rep = tail_bound_check(HALF_FLIP, pi, SIGNS, SamplerConfig(n=n, seed=11), 100_000, grid)
    elapsed = time.perf_counter() - start
    ok = rep.passed and not any(rep.skipped) and elapsed < 120
    record(acceptance_report, 5, ok,
           f"threshold {rep.threshold:.4f}, {len(rep.violations)} violations on 10 points, "
           f"max empirical tail {max(rep.empirical_tail):.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_6_second_moment(acceptance_report):
    pi = Distribution.uniform(HALF_FLIP.space)
    start_state = Distribution.point_mass(HALF_FLIP.space, 0)
    settings = [(256, 23), (512, 25), (1024, 28), (2048, 31), (4096, 34)]
    reports = [second_moment_check(HALF_FLIP, pi, SIGNS, n, n0, 20_000, start_state, seed=3)
               for n, n0 in settings]
    ok = all(r.passed for r in reports)
    record(acceptance_report, 6, ok, ", ".join(
        f"n={r.n}: {r.second_moment:.2e}>={r.lower_bound:.2e}" for r in reports))
    assert ok


@pytest.fixture(scope="module")
def ring_saddle():
    eps = 1e-4
    probe = find_saddle(ring_template(), eps)
    problem, theta = probe.problem, probe.theta_saddle
    rng = np.random.default_rng(0)
    audit = assumption_audit(problem, [theta] + [theta + rng.uniform(-1, 1, problem.dim)
                                                 for _ in range(20)])
    pi = exact_pi(problem, theta)
    kernel = build_mh_kernel(problem, theta, problem.proposal())
    gamma = spectral_gap(kernel, pi).gamma
    chi = chi_squared_divergence(Distribution.uniform(problem.space), pi)
    L0 = exact_objective(problem, theta)
    derive = dict(epsilon=eps, delta=0.1, audit=audit, gamma=gamma, chi=chi,
                  L_at_theta0=L0, L_star=-0.5)
    return problem, theta, kernel, derive


def test_criterion_7_cnc(acceptance_report, ring_saddle):
    problem, theta, kernel, derive = ring_saddle
    params = derive_table1(**derive)
    rep = cnc_check(problem, theta, kernel, SamplerConfig(n=params.n, n0=params.n0, seed=5),
                    20_000)
    ok = rep.pass_32 and not rep.skipped
    record(acceptance_report, 7, ok,
           f"n={rep.n} n0={rep.n0}: E[(v'g)^2] {rep.second_moment:.3e} "
           f"(se {rep.standard_error:.1e}) vs 1/32 bound {rep.mu_32 * rep.sigma2:.3e}, "
           f"1/16 bound {rep.mu_16 * rep.sigma2:.3e} ({'pass' if rep.pass_16 else 'fail'})")
    assert ok


def test_criterion_8_first_order_convergence(acceptance_report):
    start = time.perf_counter()
    problem = build_entropy_bandit(EntropyBanditSpec(BANDIT_REWARDS, 0.5))
    rng = np.random.default_rng(0)
    audit = assumption_audit(problem, [np.zeros(5)] + [rng.uniform(-3, 3, 5) for _ in range(30)])
    c = 1.0 / (2.0 * audit.L_smooth)
    schedule = Schedule("decaying", c=c, n=64)
    K = 2000
    quarter, final = [], []
    for seed in range(10):
        rm = sgd_run(problem, np.zeros(5), schedule, SamplerConfig(n=64), K, seed
                     ).running_min_grad_sq()
        quarter.append(rm[K // 4])
        final.append(rm[K])
    med_q, med_f = float(np.median(quarter)), float(np.median(final))
    elapsed = time.perf_counter() - start
    ok = med_f <= 0.5 * med_q and med_f <= 1e-2 and elapsed < 300
    record(acceptance_report, 8, ok,
           f"c={c:.4f}, median min|g|^2 at K/4 {med_q:.2e}, at K {med_f:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_9_saddle_escape(acceptance_report, ring_saddle):
    start = time.perf_counter()
    problem, theta, _, derive = ring_saddle
    derived = derive_table1(**derive)
    params = derive_table1(**derive, override={"beta": 0.5, "T": 100})
    result = escape_experiment(problem, theta, params, range(50))
    elapsed = time.perf_counter() - start
    ok = (result.success_fraction >= ESCAPE_SUCCESS and not result.control_success
          and elapsed < 600)
    record(acceptance_report, 9, ok,
           f"success {result.success_fraction:.2f} of 50, L_thres {params.L_thres:.2e}, "
           f"control decrease {result.control_decrease:.1e}; derived beta {derived.beta:.1e} "
           f"T {derived.T:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_10_vmc(acceptance_report):
    start = time.perf_counter()
    problem = build_ising(IsingVmcSpec(sites=4, J=1.0, h=1.0))
    E0 = problem.ground_state_energy()
    run = sgd_run(problem, np.zeros(problem.dim), Schedule("constant", alpha=0.05),
                  SamplerConfig(n=256, n0=16), 400, 0)
    L = run.losses
    err = abs(L[-1] - E0) / abs(E0)
    elapsed = time.perf_counter() - start
    ok = err <= VMC_REL_TOL and L.min() >= E0 - VMC_FLOOR_TOL and elapsed < 300
    record(acceptance_report, 10, ok,
           f"E0 {E0:.6f}, final L {L[-1]:.6f}, rel err {err:.2%}, "
           f"min L - E0 {L.min() - E0:.2e}, {elapsed:.1f}s")
    assert ok


REPRO_RUNS = [
    ("sgd", "sgd_bandit.yaml", "trace.csv"),
    ("concentration", "tail_two_state.yaml", "tail.csv"),
    ("bounds", "bounds_ising.yaml", "bounds.csv"),
    ("escape", "escape_ring.yaml", "escape.csv"),
]


def test_criterion_11_reproducibility(acceptance_report, tmp_path, monkeypatch):
    same = []
    for command, config, csv in REPRO_RUNS:
        blobs = []
        for attempt, threads in enumerate(("1", "4")):
            monkeypatch.setenv("MCMCSGD_NUM_THREADS", threads)
            out = tmp_path / f"{command}-{attempt}"
            code = main([command, "--config", str(CONFIGS / config), "--out", str(out)])
            assert code in (0, 1)
            blobs.append((out / csv).read_bytes())
        same.append(blobs[0] == blobs[1] and len(blobs[0]) > 0)
    ok = all(same)
    record(acceptance_report, 11, ok, ", ".join(
        f"{cmd} {'identical' if s else 'DIFFERS'}" for (cmd, _, _), s in zip(REPRO_RUNS, same)))
    assert ok
