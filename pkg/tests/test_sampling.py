import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcmcsgd import sampling
from mcmcsgd.chain_core import Distribution, FiniteKernel, StateSpace
from mcmcsgd.sampling import (
    SamplerConfig,
    run_chain,
    run_replicas,
    sample_states,
    state_counts,
    write_trace_csv,
)

from .conftest import two_state

PI3 = np.array([0.2, 0.3, 0.5])


def iid_kernel(pi=PI3) -> FiniteKernel:
    return FiniteKernel.from_matrix(np.tile(pi, (len(pi), 1)))


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(n=0)
    with pytest.raises(ValueError):
        SamplerConfig(n=3, n0=-1)
    with pytest.raises(ValueError):
        SamplerConfig(n=3, seed=-1)


def test_absorbing_chain_stays_put():
    space = StateSpace(5)
    K = FiniteKernel(space, np.eye(5))
    cfg = SamplerConfig(n=17, n0=4, initial=Distribution.point_mass(space, 3), seed=9)
    assert np.all(run_chain(K, cfg).states == 3)


def test_determinism():
    K = two_state(0.3, 0.2)
    cfg = SamplerConfig(n=200, n0=10, seed=42)
    a, b = run_chain(K, cfg), run_chain(K, cfg)
    assert np.array_equal(a.states, b.states)


def test_iid_frequencies():
    n = 100_000
    run = run_chain(iid_kernel(), SamplerConfig(n=n, seed=5))
    freq = np.bincount(run.states, minlength=3) / n
    assert np.all(np.abs(freq - PI3) <= 3 * np.sqrt(PI3 / n))


def test_single_replica_equals_run_chain():
    K = two_state(0.3, 0.2)
    cfg = SamplerConfig(n=50, seed=3)
    assert np.array_equal(run_replicas(K, cfg, 1)[0].states, run_chain(K, cfg).states)


def test_replicas_use_distinct_streams():
    runs = run_replicas(two_state(0.4, 0.4), SamplerConfig(n=64, seed=3), 2)
    assert [r.replica_id for r in runs] == [0, 1]
    assert not np.array_equal(runs[0].states, runs[1].states)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**63))
def test_replicas_independent_of_count_and_blocking(R, seed):
    K = two_state(0.3, 0.1)
    cfg = SamplerConfig(n=8, n0=2, seed=seed)
    full = sample_states(K, cfg, R + 3)
    assert np.array_equal(sample_states(K, cfg, R), full[:R])
    assert np.array_equal(sample_states(K, cfg, 3, first_replica=R), full[R:])


def test_parallel_matches_serial(monkeypatch):
    K = FiniteKernel.from_matrix(np.random.default_rng(0).dirichlet(np.ones(6), size=6))
    cfg = SamplerConfig(n=300, seed=8)
    monkeypatch.setattr(sampling, "_BLOCK_CELLS", 4096)
    serial = sample_states(K, cfg, 200)
    monkeypatch.setenv(sampling.THREADS_ENV, "4")
    assert np.array_equal(sample_states(K, cfg, 200), serial)


def test_pooled_stationary_mean():
    K = two_state(0.25, 0.25)
    pi = np.array([0.5, 0.5])
    h = np.array([3.0, -1.0])
    cfg = SamplerConfig(n=32, initial=Distribution(K.space, pi), seed=1)
    means = state_counts(sample_states(K, cfg, 10_000), 2) @ h / cfg.n
    se = means.std(ddof=1) / np.sqrt(len(means))
    assert abs(means.mean() - pi @ h) <= 4 * se


@pytest.mark.parametrize("index", [0, -1])
def test_stationarity_preserved(index):
    P = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7]])
    K = FiniteKernel.from_matrix(P)
    w, V = np.linalg.eig(P.T)
    pi = np.real(V[:, np.argmin(np.abs(w - 1))])
    pi /= pi.sum()
    R = 40_000
    states = sample_states(K, SamplerConfig(n=20, initial=Distribution(K.space, pi), seed=4), R)
    freq = np.bincount(states[:, index], minlength=3) / R
    assert np.all(np.abs(freq - pi) <= 4 * np.sqrt(pi * (1 - pi) / R))


def test_burn_in_contracts_total_variation():
    K = two_state(0.2, 0.2)
    start = Distribution.point_mass(K.space, 0)
    R = 40_000
    tv = []
    for n0 in (0, 2, 4, 8):
        first = sample_states(K, SamplerConfig(n=1, n0=n0, initial=start, seed=2), R)[:, 0]
        tv.append(abs(np.mean(first == 0) - 0.5))
    tol = 2 * np.sqrt(0.25 / R)
    assert all(b <= a + tol for a, b in zip(tv, tv[1:]))
    assert tv[-1] < tv[0]


def test_state_counts_rows():
    states = np.array([[0, 1, 1, 2], [2, 2, 2, 2]])
    assert state_counts(states, 3).tolist() == [[1, 2, 1], [0, 0, 4]]


def test_trace_csv(tmp_path):
    runs = run_replicas(two_state(0.5, 0.5), SamplerConfig(n=3, n0=2, seed=0), 2)
    path = tmp_path / "trace.csv"
    write_trace_csv(path, runs)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["replica_id", "step", "state_index"]
    assert [r[:2] for r in rows[1:4]] == [["0", "3"], ["0", "4"], ["0", "5"]]
    assert len(rows) == 7
