import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcmcsgd.chain_core import build_mh_kernel, chi_squared_divergence, exact_pi, spectral_gap
from mcmcsgd.errors import DerivationError, DivergenceError, RegimeError
from mcmcsgd.estimators import (
    assumption_audit,
    compute_bounds,
    exact_gradient,
    exact_objective,
    replica_gradients,
)
from mcmcsgd.optimizer import (
    Schedule,
    classify_regime,
    derive_table1,
    escape_experiment,
    regime_of,
    sgd_run,
)
from mcmcsgd.problems import TabularProblem, find_saddle, ring_template
from mcmcsgd.sampling import SamplerConfig

# -- schedules ----------------------------------------------------------------


def test_decaying_schedule_values():
    s = Schedule("decaying", c=0.1, n=16)
    assert s.rate(1) == pytest.approx(0.4)
    assert s.rate(4) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        s.rate(0)
    assert s.for_iteration(0) == s.rate(1)


@pytest.mark.parametrize("kwargs", [
    {"kind": "cosine", "alpha": 0.1},
    {"kind": "constant", "alpha": 0.0},
    {"kind": "two_phase", "alpha": 0.2, "beta": 0.1, "T": 3},
    {"kind": "two_phase", "alpha": 0.1, "beta": 0.2, "T": 0},
    {"kind": "decaying", "c": -1.0, "n": 4},
])
def test_schedule_validation(kwargs):
    with pytest.raises(ValueError):
        Schedule(**kwargs)


@given(st.integers(1, 30), st.integers(1, 20))
def test_two_phase_one_big_step_per_period(T, periods):
    s = Schedule("two_phase", alpha=0.01, beta=0.5, T=T)
    K = T * periods
    rates = [s.for_iteration(k) for k in range(K)]
    assert sum(r == 0.5 for r in rates) == K // T
    assert rates[0] == 0.5


# -- regimes ------------------------------------------------------------------


def test_regime_examples():
    eps = 0.01
    assert regime_of(2 * eps, -5.0, 1.0, eps) == "R1"
    assert regime_of(0.0, 1.0, 1.0, eps) == "R3"
    assert regime_of(0.0, -1.0, 0.0, eps) == "R3"
    assert regime_of(0.0, -1.0, 1.0, eps) == "R2"


@given(st.floats(0, 10), st.floats(-10, 10), st.floats(0, 10), st.floats(1e-6, 0.9))
def test_regimes_partition(gn, lam, var, eps):
    label = regime_of(gn, lam, var, eps)
    r1 = gn >= eps
    r2 = gn < eps and lam <= -eps**0.25 and var >= eps**0.5
    r3 = gn < eps and (lam > -eps**0.25 or var < eps**0.5)
    assert [r1, r2, r3].count(True) == 1
    assert label == ("R1" if r1 else "R2" if r2 else "R3")


def test_classify_flat_problem():
    flat = TabularProblem(np.eye(3), np.full(3, 2.0))
    label = classify_regime(flat, np.zeros(3), 0.01)
    assert label.label == "R3" and label.sigma2 == 0.0


# -- SGD loop -----------------------------------------------------------------


def test_constant_f_does_not_move():
    flat = TabularProblem(np.eye(3), np.full(3, 2.0))
    theta0 = np.array([0.1, -0.2, 0.3])
    rec = sgd_run(flat, theta0, Schedule("constant", alpha=0.5), SamplerConfig(n=16), 20, seed=1)
    assert np.array_equal(rec.thetas[-1], theta0)


def test_run_guards(bandit):
    with pytest.raises(ValueError):
        sgd_run(bandit, np.zeros(5), Schedule("constant", alpha=0.1), SamplerConfig(n=8), 0, 0)
    with pytest.raises(ValueError):
        sgd_run(bandit, np.zeros(5), Schedule("two_phase", alpha=0.1, beta=0.5, T=4),
                SamplerConfig(n=8), 10, 0)


def test_run_record_complete_and_deterministic(bandit, tmp_path):
    sched = Schedule("two_phase", alpha=0.05, beta=0.3, T=5)
    a = sgd_run(bandit, np.zeros(5), sched, SamplerConfig(n=16), 20, seed=3, epsilon=0.01)
    b = sgd_run(bandit, np.zeros(5), sched, SamplerConfig(n=16), 20, seed=3, epsilon=0.01)
    assert [r["k"] for r in a.iterations] == list(range(21))
    assert [p["k"] for p in a.periods] == [0, 5, 10, 15, 20]
    assert all(p["regime"] in ("R1", "R2", "R3") for p in a.periods)
    assert np.array_equal(a.thetas, b.thetas)
    rm = a.running_min_grad_sq()
    assert np.all(np.diff(rm) <= 0)
    a.write_csv(tmp_path / "a.csv")
    b.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.DictReader((tmp_path / "a.csv").open()))
    assert float(rows[0]["alpha"]) == 0.3 and rows[-1]["alpha"] == ""
    summary = a.summary()
    assert summary["seed"] == 3 and len(summary["regime_history"]) == 5


def test_different_seeds_differ(bandit):
    sched = Schedule("constant", alpha=0.05)
    a = sgd_run(bandit, np.zeros(5), sched, SamplerConfig(n=16), 5, seed=1)
    b = sgd_run(bandit, np.zeros(5), sched, SamplerConfig(n=16), 5, seed=2)
    assert not np.array_equal(a.thetas, b.thetas)


def test_warm_start_runs(ising3):
    rec = sgd_run(ising3, np.zeros(5), Schedule("constant", alpha=0.05), SamplerConfig(n=32),
                  10, seed=0, warm_start=True)
    assert rec.config["warm_start"] and len(rec.iterations) == 11


def test_divergence_carries_partial_record(bandit):
    with pytest.raises(DivergenceError) as info:
        sgd_run(bandit, np.zeros(5), Schedule("constant", alpha=1e9), SamplerConfig(n=64), 50, 0)
    assert info.value.record is not None and len(info.value.record.iterations) >= 1


def test_descent_step_is_positive_on_average(bandit):
    theta = np.array([0.5, -0.5, 1.0, 0.0, -1.0])
    rng = np.random.default_rng(0)
    audit = assumption_audit(bandit, [theta] + [theta + rng.uniform(-1, 1, 5) for _ in range(10)])
    pi = exact_pi(bandit, theta)
    K = build_mh_kernel(bandit, theta, bandit.proposal())
    gamma = spectral_gap(K, pi).gamma
    n = 64
    bounds = compute_bounds(audit, gamma, 0.0, n, 0)
    g = exact_gradient(bandit, theta)
    alpha = min(1 / (2 * audit.L_smooth), (g @ g) / (4 * audit.L_smooth * bounds.V_var))
    assert g @ g >= 2 * (bounds.B_bias**2 + alpha * audit.L_smooth * bounds.V_var)
    grads, _ = replica_gradients(bandit, theta, K, SamplerConfig(n=n, initial=pi, seed=4), 4000)
    L0 = exact_objective(bandit, theta)
    dec = np.array([L0 - exact_objective(bandit, theta - alpha * gh) for gh in grads])
    assert dec.mean() + 3 * dec.std(ddof=1) / math.sqrt(len(dec)) > 0
    assert dec.mean() > 0


# -- parameter table ----------------------------------------------------------


@pytest.fixture(scope="module")
def saddle_setup():
    eps = 1e-4
    probe = find_saddle(ring_template(), eps)
    p, th = probe.problem, probe.theta_saddle
    rng = np.random.default_rng(0)
    audit = assumption_audit(p, [th] + [th + rng.uniform(-1, 1, 2) for _ in range(10)])
    pi = exact_pi(p, th)
    gamma = spectral_gap(build_mh_kernel(p, th, p.proposal()), pi).gamma
    from mcmcsgd.chain_core import Distribution

    chi = chi_squared_divergence(Distribution.uniform(p.space), pi)
    return eps, p, th, audit, gamma, chi


def test_table_invariants(saddle_setup):
    eps, p, th, audit, gamma, chi = saddle_setup
    delta = 0.1
    L0, Lstar = exact_objective(p, th), -0.5
    prm = derive_table1(eps, delta, audit, gamma, chi, L0, Lstar)
    V = prm.provenance["V"]
    l_g, rho, L = audit.l_g, audit.rho, audit.L_smooth
    assert prm.n == math.ceil(audit.eta * gamma / (64 * eps))
    assert prm.beta == pytest.approx(delta * eps**2 / (192 * l_g * rho * L * V))
    assert prm.alpha == pytest.approx(prm.beta / math.sqrt(prm.T))
    assert prm.L_thres == pytest.approx(prm.beta * eps**2 / (192 * rho * l_g))
    mu = audit.eta * gamma / (16 * prm.n)
    T = math.ceil(math.log(rho * l_g * L * V / (mu * delta * eps)) ** 2
                  / (prm.beta**2 * math.sqrt(eps)))
    assert prm.T == T
    assert prm.K % prm.T == 0
    assert prm.K >= 2 * (L0 - Lstar) * prm.T / (delta * prm.L_thres)
    assert prm.K - prm.T < 2 * (L0 - Lstar) * prm.T / (delta * prm.L_thres)
    assert prm.n0 >= 0
    assert set(prm.consistency) >= {"R1_beta", "R1_bias", "R1_Lthres", "R2_Lthres", "R2_bias",
                                    "R2_beta"}


def test_table_override_records_both(saddle_setup):
    eps, p, th, audit, gamma, chi = saddle_setup
    prm = derive_table1(eps, 0.1, audit, gamma, chi, 0.0, -0.5, override={"beta": 0.5, "T": 100})
    assert prm.beta == 0.5 and prm.T == 100 and prm.alpha == pytest.approx(0.05)
    assert prm.derived["beta"] != 0.5
    assert prm.overridden == {"beta": 0.5, "T": 100}
    assert prm.L_thres == pytest.approx(0.5 * eps**2 / (192 * audit.rho * audit.l_g))
    with pytest.raises(DerivationError):
        derive_table1(eps, 0.1, audit, gamma, chi, 0.0, -0.5, override={"gamma": 1.0})


def test_table_rejects_bad_constants(saddle_setup):
    eps, p, th, audit, gamma, chi = saddle_setup
    import dataclasses

    bad = dataclasses.replace(audit, rho=0.0)
    with pytest.raises(DerivationError):
        derive_table1(eps, 0.1, bad, gamma, chi, 0.0, -0.5)
    with pytest.raises(DerivationError):
        derive_table1(1.5, 0.1, audit, gamma, chi, 0.0, -0.5)


# -- escape -------------------------------------------------------------------


def test_escape_requires_r2(saddle_setup):
    eps, p, th, audit, gamma, chi = saddle_setup
    prm = derive_table1(eps, 0.1, audit, gamma, chi, 0.0, -0.5, override={"beta": 0.5, "T": 10})
    flat = TabularProblem(np.eye(2), np.full(2, 1.0))
    with pytest.raises(RegimeError) as info:
        escape_experiment(flat, np.zeros(2), prm, [0])
    assert info.value.regime == "R3"


def test_escape_small_run(saddle_setup):
    eps, p, th, audit, gamma, chi = saddle_setup
    prm = derive_table1(eps, 0.1, audit, gamma, chi, exact_objective(p, th), -0.5,
                        override={"beta": 0.5, "T": 100})
    res = escape_experiment(p, th, prm, range(5))
    assert res.success_fraction >= 0.8
    assert res.control_decrease < prm.L_thres and not res.control_success
    assert len(res.decreases) == 5
