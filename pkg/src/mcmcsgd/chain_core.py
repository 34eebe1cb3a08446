"""Finite-state Markov kernel algebra.

Stationary distributions of energy-based models, Metropolis-Hastings kernel
construction, the absolute spectral gap and the chi-squared divergence. All
routines are dense and exact; state spaces are assumed small enough to
enumerate (a few thousand states at most).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import (
    DegenerateGapError,
    InfiniteDivergenceError,
    InvalidKernelError,
    InvalidProblemError,
    ProposalSupportError,
    StationarityError,
)

STOCHASTIC_TOL = 1e-12
STATIONARY_TOL = 1e-10
GAP_FLOOR = 1e-12


def _identity(index: int) -> int:
    return index


@dataclass(frozen=True)
class StateSpace:
    """Enumerated finite state space ``{0, ..., size-1}``.

    ``decode`` maps an index to the problem-specific configuration (a spin
    vector, an action label, ...). It must be deterministic.
    """

    size: int
    decode: Callable[[int], Any] = field(default=_identity, compare=False, repr=False)
    label: str = ""

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 2:
            raise ValueError(f"state space needs size >= 2, got {self.size!r}")

    def states(self) -> list:
        return [self.decode(i) for i in range(self.size)]


@dataclass(frozen=True)
class Distribution:
    space: StateSpace
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.shape != (self.space.size,):
            raise ValueError(f"expected {self.space.size} weights, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("distribution weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > STOCHASTIC_TOL:
            raise ValueError(f"distribution weights sum to {w.sum()!r}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, space: StateSpace) -> "Distribution":
        return cls(space, np.full(space.size, 1.0 / space.size))

    @classmethod
    def point_mass(cls, space: StateSpace, index: int) -> "Distribution":
        w = np.zeros(space.size)
        w[index] = 1.0
        return cls(space, w)

    def to_dict(self) -> dict:
        return {
            "kind": "distribution",
            "space_size": self.space.size,
            "label": self.space.label,
            "weights": [float(x) for x in self.weights],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict, space: StateSpace | None = None) -> "Distribution":
        space = space or StateSpace(int(doc["space_size"]), label=doc.get("label", ""))
        return cls(space, np.asarray(doc["weights"], dtype=float))

    @classmethod
    def from_json(cls, text: str, space: StateSpace | None = None) -> "Distribution":
        return cls.from_dict(json.loads(text), space)


@dataclass(frozen=True)
class FiniteKernel:
    """Row-stochastic transition matrix ``rows[x, y] = P(x, y)``."""

    space: StateSpace
    rows: np.ndarray

    def __post_init__(self):
        P = np.array(self.rows, dtype=float)
        n = self.space.size
        if P.shape != (n, n):
            raise InvalidKernelError(f"kernel must be {n}x{n}, got shape {P.shape}")
        if not np.all(np.isfinite(P)) or np.any(P < 0):
            raise InvalidKernelError("kernel entries must be finite and non-negative")
        worst = np.max(np.abs(P.sum(axis=1) - 1.0))
        if worst > STOCHASTIC_TOL:
            raise InvalidKernelError(f"kernel rows deviate from 1 by up to {worst:.3e}")
        P.setflags(write=False)
        object.__setattr__(self, "rows", P)

    @classmethod
    def from_matrix(cls, rows, label: str = "") -> "FiniteKernel":
        rows = np.asarray(rows, dtype=float)
        return cls(StateSpace(rows.shape[0], label=label), rows)

    def step(self, dist: Distribution, k: int = 1) -> Distribution:
        """Return ``dist P^k``."""
        w = np.array(dist.weights)
        for _ in range(k):
            w = w @ self.rows
        w = np.clip(w, 0.0, None)
        return Distribution(self.space, w / w.sum())

    def to_dict(self) -> dict:
        return {
            "kind": "kernel",
            "space_size": self.space.size,
            "label": self.space.label,
            "rows": [[float(x) for x in row] for row in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict, space: StateSpace | None = None) -> "FiniteKernel":
        space = space or StateSpace(int(doc["space_size"]), label=doc.get("label", ""))
        return cls(space, np.asarray(doc["rows"], dtype=float))

    @classmethod
    def from_json(cls, text: str, space: StateSpace | None = None) -> "FiniteKernel":
        return cls.from_dict(json.loads(text), space)


@dataclass(frozen=True)
class SpectralReport:
    gamma: float
    lam: float
    pi: Distribution
    reversible: bool

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "lambda": self.lam,
            "reversible": self.reversible,
            "pi": [float(x) for x in self.pi.weights],
        }


def softmax(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    z = np.exp(phi - phi.max())
    return z / z.sum()


def exact_pi(problem, theta) -> Distribution:
    """Stationary distribution ``pi(x) ∝ exp(phi_theta(x))`` by enumeration."""
    phi = np.asarray(problem.phi(np.asarray(theta, dtype=float)), dtype=float)
    if phi.shape != (problem.space.size,) or not np.all(np.isfinite(phi)):
        raise InvalidProblemError("energy function must be finite at every state")
    return Distribution(problem.space, softmax(phi))


def uniform_proposal(space: StateSpace) -> FiniteKernel:
    return FiniteKernel(space, np.full((space.size, space.size), 1.0 / space.size))


def single_flip_proposal(space: StateSpace, sites: int, hold: float = 0.0) -> FiniteKernel:
    """Flip one uniformly chosen bit of the state index, or stay with probability ``hold``.

    Without holding, the walk alternates between even and odd states and has
    absolute spectral gap 0 whenever every flip is accepted.
    """
    if space.size != 2**sites:
        raise InvalidKernelError(f"space of size {space.size} is not 2**{sites}")
    if not 0.0 <= hold < 1.0:
        raise InvalidKernelError("hold probability must lie in [0, 1)")
    Q = np.zeros((space.size, space.size))
    idx = np.arange(space.size)
    for i in range(sites):
        Q[idx, idx ^ (1 << i)] += (1.0 - hold) / sites
    Q[idx, idx] += hold
    return FiniteKernel(space, Q)


def metropolis_hastings(phi: np.ndarray, proposal: np.ndarray) -> np.ndarray:
    """MH transition matrix for target ``∝ exp(phi)`` and proposal rows ``q(.|x)``."""
    phi = np.asarray(phi, dtype=float)
    Q = np.asarray(proposal, dtype=float)
    support = Q > 0
    if np.any(support != support.T):
        bad = np.argwhere(support != support.T)[0]
        raise ProposalSupportError(
            f"proposal support is not symmetric: q({bad[1]}|{bad[0]}) > 0 "
            f"but q({bad[0]}|{bad[1]}) = 0 (or vice versa)"
        )
    logQ = np.log(np.where(support, Q, 1.0))
    log_ratio = np.where(support, phi[None, :] - phi[:, None] + logQ.T - logQ, -np.inf)
    accept = np.exp(np.minimum(log_ratio, 0.0))
    P = np.where(support, Q * accept, 0.0)
    np.fill_diagonal(P, 0.0)
    np.fill_diagonal(P, 1.0 - P.sum(axis=1))
    return P


def build_mh_kernel(problem, theta, proposal: FiniteKernel) -> FiniteKernel:
    """Metropolis-Hastings kernel targeting ``exact_pi(problem, theta)``.

    Rejected proposal mass is moved to the diagonal, so the result is exactly
    row-stochastic and satisfies detailed balance with respect to pi.
    """
    if proposal.space.size != problem.space.size:
        raise InvalidKernelError("proposal and problem live on different state spaces")
    phi = np.asarray(problem.phi(np.asarray(theta, dtype=float)), dtype=float)
    if not np.all(np.isfinite(phi)):
        raise InvalidProblemError("energy function must be finite at every state")
    return FiniteKernel(problem.space, metropolis_hastings(phi, proposal.rows))


def is_reversible(P: np.ndarray, pi: np.ndarray, tol: float = STOCHASTIC_TOL) -> bool:
    flow = pi[:, None] * P
    return bool(np.max(np.abs(flow - flow.T)) <= tol)


def spectral_gap(kernel: FiniteKernel, pi: Distribution) -> SpectralReport:
    """Absolute spectral gap ``1 - |||P - Pi|||`` on ``L^2(pi)``.

    Under the isometry ``f -> D^{1/2} f`` the operator ``P - Pi`` becomes
    ``D^{1/2} P D^{-1/2} - sqrt(pi) sqrt(pi)^T``. For reversible kernels that
    matrix is symmetric and its norm is the largest absolute eigenvalue;
    otherwise the largest singular value is used.
    """
    P = kernel.rows
    w = pi.weights
    if np.any(w <= 0):
        raise StationarityError("spectral gap requires a strictly positive pi")
    drift = np.abs(w @ P - w).sum()
    if drift > STATIONARY_TOL:
        raise StationarityError(f"pi is not stationary for the kernel: |pi P - pi|_1 = {drift:.3e}")
    root = np.sqrt(w)
    A = root[:, None] * P / root[None, :] - np.outer(root, root)
    reversible = is_reversible(P, w)
    if reversible:
        lam = float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (A + A.T)))))
    else:
        lam = float(np.linalg.norm(A, ord=2))
    gamma = 1.0 - lam
    if gamma <= GAP_FLOOR:
        raise DegenerateGapError(f"absolute spectral gap is {gamma:.3e}; the chain does not mix")
    return SpectralReport(gamma=gamma, lam=lam, pi=pi, reversible=reversible)


def chi_squared_divergence(nu: Distribution, pi: Distribution) -> float:
    """Return chi(nu, pi), the square root of ``||dnu/dpi - 1||^2_pi``."""
    a = np.asarray(nu.weights, dtype=float)
    b = np.asarray(pi.weights, dtype=float)
    if np.any((b <= 0) & (a > 0)):
        raise InfiniteDivergenceError("nu charges a state where pi vanishes")
    mask = b > 0
    return float(np.sqrt(np.sum((a[mask] - b[mask]) ** 2 / b[mask])))


def stationary_distribution(kernel: FiniteKernel) -> Distribution:
    """Solve ``pi P = pi`` with ``sum(pi) = 1`` for an irreducible kernel."""
    n = kernel.space.size
    A = np.vstack([kernel.rows.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    w, *_ = np.linalg.lstsq(A, b, rcond=None)
    w = np.clip(w, 0.0, None)
    return Distribution(kernel.space, w / w.sum())
