"""Seeded Markov chain trajectories.

Every replica draws from its own stream, keyed by ``(seed, replica_id)``
through :class:`numpy.random.SeedSequence`. A replica's trajectory therefore
does not depend on how many other replicas were requested, on the block
size, or on the order in which blocks are simulated.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .chain_core import Distribution, FiniteKernel

THREADS_ENV = "MCMCSGD_NUM_THREADS"
# Upper bound on the number of float64 cells (uniforms or kernel-row lookups)
# materialised per block.
_BLOCK_CELLS = 1 << 22


@dataclass(frozen=True)
class SamplerConfig:
    n: int
    n0: int = 0
    initial: Distribution | None = None
    seed: int = 0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        if int(self.n0) != self.n0 or self.n0 < 0:
            raise ValueError(f"n0 must be a non-negative integer, got {self.n0!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "n0", int(self.n0))
        object.__setattr__(self, "seed", int(self.seed))

    def with_(self, **changes) -> "SamplerConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class ChainRun:
    config: SamplerConfig
    states: np.ndarray
    replica_id: int = 0

    def __post_init__(self):
        if len(self.states) != self.config.n:
            raise ValueError("retained states do not match config.n")


def replica_rng(seed: int, replica_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replica_id)]))


def _initial_weights(kernel: FiniteKernel, config: SamplerConfig) -> np.ndarray:
    if config.initial is None:
        return np.full(kernel.space.size, 1.0 / kernel.space.size)
    if config.initial.space.size != kernel.space.size:
        raise ValueError("initial distribution lives on a different state space")
    return np.asarray(config.initial.weights)


def _inverse_cdf(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    # cum[..., j] = P(X <= j); pick the first j with u < cum[j].
    idx = (cum <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, cum.shape[-1] - 1)


def _state_dtype(size: int):
    return np.uint16 if size <= np.iinfo(np.uint16).max else np.int64


def _simulate_block(cum: np.ndarray, init_cum: np.ndarray, config: SamplerConfig,
                    replica_ids: Sequence[int]) -> np.ndarray:
    steps = config.n0 + config.n
    uniforms = np.empty((len(replica_ids), steps))
    for row, rid in enumerate(replica_ids):
        uniforms[row] = replica_rng(config.seed, rid).random(steps)
    out = np.empty((len(replica_ids), config.n), dtype=_state_dtype(cum.shape[0]))
    x = _inverse_cdf(init_cum[None, :], uniforms[:, 0])
    if config.n0 == 0:
        out[:, 0] = x
    for t in range(1, steps):
        x = _inverse_cdf(cum[x], uniforms[:, t])
        if t >= config.n0:
            out[:, t - config.n0] = x
    return out


def _block_size(size: int, steps: int) -> int:
    return max(1, min(_BLOCK_CELLS // max(steps, 1), _BLOCK_CELLS // size))


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def iter_replica_blocks(kernel: FiniteKernel, config: SamplerConfig, R: int,
                        first_replica: int = 0) -> Iterator[np.ndarray]:
    """Yield retained-state arrays of shape ``(block, n)`` covering R replicas in order."""
    if R < 1:
        raise ValueError("R must be at least 1")
    cum = np.cumsum(kernel.rows, axis=1)
    init_cum = np.cumsum(_initial_weights(kernel, config))
    size = _block_size(kernel.space.size, config.n0 + config.n)
    ids = list(range(first_replica, first_replica + R))
    blocks = [ids[i:i + size] for i in range(0, R, size)]
    threads = num_threads()
    if threads == 1 or len(blocks) == 1:
        for block in blocks:
            yield _simulate_block(cum, init_cum, config, block)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield from pool.map(lambda b: _simulate_block(cum, init_cum, config, b), blocks)


def sample_states(kernel: FiniteKernel, config: SamplerConfig, R: int,
                  first_replica: int = 0) -> np.ndarray:
    """Retained states of R replicas as one ``(R, n)`` array."""
    return np.concatenate(list(iter_replica_blocks(kernel, config, R, first_replica)), axis=0)


def run_chain(kernel: FiniteKernel, config: SamplerConfig, replica_id: int = 0) -> ChainRun:
    """One trajectory: ``x1 ~ initial``, ``x_{i+1} ~ P(x_i, .)``, first n0 states dropped."""
    states = sample_states(kernel, config, 1, first_replica=replica_id)[0]
    return ChainRun(config=config, states=states, replica_id=replica_id)


def run_replicas(kernel: FiniteKernel, config: SamplerConfig, R: int) -> list[ChainRun]:
    states = sample_states(kernel, config, R)
    return [ChainRun(config=config, states=row, replica_id=r) for r, row in enumerate(states)]


def state_counts(states: np.ndarray, size: int) -> np.ndarray:
    """Per-replica visit counts, shape ``(R, size)``."""
    states = np.atleast_2d(states)
    R = states.shape[0]
    flat = (np.arange(R)[:, None] * size + states.astype(np.int64)).ravel()
    return np.bincount(flat, minlength=R * size).reshape(R, size)


def write_trace_csv(path, runs: Sequence[ChainRun]) -> None:
    """Dump trajectories as ``replica_id, step, state_index`` rows.

    ``step`` counts retained samples from ``n0 + 1``, matching the indexing of
    the retained set ``{x_{n0+1}, ..., x_{n0+n}}``.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replica_id", "step", "state_index"])
        for run in runs:
            base = run.config.n0 + 1
            for i, s in enumerate(run.states):
                writer.writerow([run.replica_id, base + i, int(s)])
