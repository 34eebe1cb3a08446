"""Desk-scale problem instances with exact oracles.

* transverse-field Ising model with a log-linear (Jastrow-type) ansatz,
* entropy-regularised softmax bandit,
* discrete variational inference against a fixed target,
* a strict-saddle probe: exponential family with a fixed, parameter-free f.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import least_squares
from scipy.sparse.linalg import eigsh

from .chain_core import FiniteKernel, StateSpace, single_flip_proposal, softmax
from .errors import InvalidProblemError, SearchFailure
from .estimators import (
    ProblemDefinition,
    central_moments,
    exact_gradient,
    exact_hessian,
    exact_pi,
)


def _log_softmax(phi: np.ndarray) -> np.ndarray:
    m = phi.max()
    return phi - m - math.log(np.exp(phi - m).sum())


class TabularProblem(ProblemDefinition):
    """``phi = T theta + theta^T Q theta / 2`` and ``f = a + c * log pi_theta``.

    With ``c != 0`` the identity ``E_pi[grad log pi] = 0`` gives
    ``E_pi[grad f] = 0``; with ``c = 0`` f does not depend on theta at all.
    """

    def __init__(self, features, offset, log_pi_coef: float = 0.0, quad=None,
                 name: str = "tabular", labels: Sequence | None = None):
        T = np.asarray(features, dtype=float)
        if T.ndim != 2:
            raise InvalidProblemError("features must be a (states, dim) array")
        a = np.asarray(offset, dtype=float)
        if a.shape != (T.shape[0],) or not np.all(np.isfinite(a)):
            raise InvalidProblemError("offset must be finite with one entry per state")
        self.features = T
        self.offset = a
        self.log_pi_coef = float(log_pi_coef)
        self.quad = None if quad is None else np.asarray(quad, dtype=float)
        if self.quad is not None and self.quad.shape != (T.shape[0], T.shape[1], T.shape[1]):
            raise InvalidProblemError("quad must have shape (states, dim, dim)")
        if self.quad is not None:
            self.quad = 0.5 * (self.quad + self.quad.transpose(0, 2, 1))
        self.dim = T.shape[1]
        decode = (lambda i: labels[i]) if labels is not None else (lambda i: i)
        self.space = StateSpace(T.shape[0], decode=decode, label=name)
        self.name = name

    def phi(self, theta):
        theta = np.asarray(theta, dtype=float)
        out = self.features @ theta
        if self.quad is not None:
            out = out + 0.5 * np.einsum("i,xij,j->x", theta, self.quad, theta)
        return out

    def grad_phi(self, theta):
        theta = np.asarray(theta, dtype=float)
        G = self.features.copy()
        if self.quad is not None:
            G = G + self.quad @ theta
        return G

    def hess_phi(self, theta):
        if self.quad is None:
            return np.zeros((self.space.size, self.dim, self.dim))
        return self.quad.copy()

    def log_pi(self, theta):
        return _log_softmax(self.phi(theta))

    def f(self, theta):
        if self.log_pi_coef == 0.0:
            return self.offset.copy()
        return self.offset + self.log_pi_coef * self.log_pi(theta)

    def grad_f(self, theta):
        if self.log_pi_coef == 0.0:
            return np.zeros((self.space.size, self.dim))
        G = self.grad_phi(theta)
        pi = softmax(self.phi(theta))
        return self.log_pi_coef * (G - pi @ G)


# ---------------------------------------------------------------------------
# entropy-regularised bandit


@dataclass(frozen=True)
class EntropyBanditSpec:
    rewards: tuple
    beta_reg: float


class EntropyBandit(TabularProblem):
    """Softmax policy ``pi_theta(x) ∝ exp(theta_x)`` with ``f = -r + beta log pi``."""

    def __init__(self, spec: EntropyBanditSpec):
        r = np.asarray(spec.rewards, dtype=float)
        if spec.beta_reg <= 0:
            raise InvalidProblemError("entropy weight beta_reg must be positive")
        if r.ndim != 1 or r.size < 2:
            raise InvalidProblemError("need at least two actions")
        super().__init__(np.eye(r.size), -r, log_pi_coef=spec.beta_reg, name="entropy_bandit")
        self.spec = spec
        self.rewards = r
        self.beta_reg = float(spec.beta_reg)

    def optimal_policy(self) -> np.ndarray:
        return softmax(self.rewards / self.beta_reg)

    def optimal_theta(self) -> np.ndarray:
        return self.rewards / self.beta_reg

    def optimal_value(self) -> float:
        z = self.rewards / self.beta_reg
        m = z.max()
        return float(-self.beta_reg * (m + math.log(np.exp(z - m).sum())))

    def config(self) -> dict:
        return {"kind": "bandit", "rewards": self.rewards.tolist(), "beta_reg": self.beta_reg}


def build_entropy_bandit(spec: EntropyBanditSpec) -> EntropyBandit:
    return EntropyBandit(spec)


# ---------------------------------------------------------------------------
# discrete variational inference


@dataclass(frozen=True)
class DiscreteViSpec:
    target: tuple
    features: np.ndarray | None = None
    orientation: str = "reverse_kl"


class DiscreteVI(TabularProblem):
    """Fit ``pi_theta`` to a fixed positive target p.

    ``orientation="reverse_kl"`` uses ``f = log(pi_theta / p)``, so that
    ``L = KL(pi_theta || p) >= 0`` with equality at ``pi_theta = p``.
    ``orientation="as_displayed"`` uses ``f = log(p / pi_theta)`` instead.
    """

    def __init__(self, spec: DiscreteViSpec):
        p = np.asarray(spec.target, dtype=float)
        if p.ndim != 1 or p.size < 2 or np.any(p <= 0) or abs(p.sum() - 1) > 1e-12:
            raise InvalidProblemError("target must be a strictly positive distribution")
        T = np.eye(p.size) if spec.features is None else np.asarray(spec.features, dtype=float)
        if spec.orientation == "reverse_kl":
            offset, coef = -np.log(p), 1.0
        elif spec.orientation == "as_displayed":
            offset, coef = np.log(p), -1.0
        else:
            raise InvalidProblemError(f"unknown VI orientation {spec.orientation!r}")
        super().__init__(T, offset, log_pi_coef=coef, name="discrete_vi")
        self.spec = spec
        self.target = p

    def optimal_policy(self) -> np.ndarray:
        return self.target.copy()

    def optimal_value(self) -> float:
        return 0.0

    def config(self) -> dict:
        return {"kind": "vi", "target": self.target.tolist(), "orientation": self.spec.orientation}


def build_discrete_vi(spec: DiscreteViSpec) -> DiscreteVI:
    return DiscreteVI(spec)


# ---------------------------------------------------------------------------
# transverse-field Ising model


@dataclass(frozen=True)
class IsingVmcSpec:
    sites: int
    J: float = 1.0
    h: float = 1.0
    periodic: bool = False
    features: str = "nn"


def spins(sites: int) -> np.ndarray:
    """Spin configurations ``z[x, i] = 1 - 2 * bit_i(x)``."""
    idx = np.arange(2**sites)
    return 1.0 - 2.0 * ((idx[:, None] >> np.arange(sites)[None, :]) & 1)


def ising_bonds(sites: int, periodic: bool) -> list[tuple[int, int]]:
    bonds = [(i, i + 1) for i in range(sites - 1)]
    if periodic and sites > 2:
        bonds.append((sites - 1, 0))
    return bonds


def ising_hamiltonian(spec: IsingVmcSpec) -> sparse.csr_matrix:
    """``H = -J sum_<ij> Z_i Z_j - h sum_i X_i`` in the computational basis."""
    N = spec.sites
    z = spins(N)
    bonds = ising_bonds(N, spec.periodic)
    diag = -spec.J * sum(z[:, i] * z[:, j] for i, j in bonds)
    S = 2**N
    idx = np.arange(S)
    rows = [idx] + [idx] * N
    cols = [idx] + [idx ^ (1 << i) for i in range(N)]
    vals = [diag] + [np.full(S, -spec.h)] * N
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(S, S))


def ground_state_energy(spec: IsingVmcSpec) -> float:
    H = ising_hamiltonian(spec)
    if H.shape[0] <= 1024:
        return float(np.linalg.eigvalsh(H.toarray())[0])
    return float(eigsh(H, k=1, which="SA", return_eigenvectors=False)[0])


class IsingVmc(ProblemDefinition):
    """Variational energy of a positive log-linear wavefunction.

    ``log psi_theta(x) = theta^T T(x)``, ``phi = 2 log psi`` and the local
    energy is ``f(x) = (H psi)(x) / psi(x)``.
    """

    def __init__(self, spec: IsingVmcSpec):
        if not 2 <= spec.sites <= 12:
            raise InvalidProblemError(f"sites must be in [2, 12], got {spec.sites}")
        self.spec = spec
        N = spec.sites
        z = spins(N)
        bonds = ising_bonds(N, spec.periodic)
        if spec.features == "nn":
            pairs = bonds
        elif spec.features == "all_pairs":
            pairs = [(i, j) for i in range(N) for j in range(i + 1, N)]
        else:
            raise InvalidProblemError(f"unknown feature set {spec.features!r}")
        self.pairs = pairs
        self.features = np.hstack([z, np.stack([z[:, i] * z[:, j] for i, j in pairs], axis=1)])
        self.diag = -spec.J * sum(z[:, i] * z[:, j] for i, j in bonds)
        self.flips = np.arange(2**N)[:, None] ^ (1 << np.arange(N))[None, :]
        self.dim = self.features.shape[1]
        self.space = StateSpace(2**N, decode=lambda x: tuple(int(s) for s in z[x]), label="tfim")
        self.name = "ising_vmc"

    def log_psi(self, theta):
        return self.features @ np.asarray(theta, dtype=float)

    def phi(self, theta):
        return 2.0 * self.log_psi(theta)

    def grad_phi(self, theta):
        return 2.0 * self.features

    def hess_phi(self, theta):
        return np.zeros((self.space.size, self.dim, self.dim))

    @property
    def has_hess_phi(self) -> bool:
        return True

    def _ratios(self, theta):
        lp = self.log_psi(theta)
        return np.exp(lp[self.flips] - lp[:, None])

    def f(self, theta):
        return self.diag - self.spec.h * self._ratios(theta).sum(axis=1)

    def grad_f(self, theta):
        ratios = self._ratios(theta)
        dT = self.features[self.flips] - self.features[:, None, :]
        return -self.spec.h * np.einsum("xi,xid->xd", ratios, dT)

    def proposal(self) -> FiniteKernel:
        # lazy flips keep the chain aperiodic at theta = 0
        N = self.spec.sites
        return single_flip_proposal(self.space, N, hold=1.0 / (N + 1))

    def ground_state_energy(self) -> float:
        return ground_state_energy(self.spec)

    def config(self) -> dict:
        s = self.spec
        return {"kind": "ising", "N": s.sites, "J": s.J, "h": s.h, "periodic": s.periodic,
                "features": s.features}


def build_ising(spec: IsingVmcSpec) -> IsingVmc:
    return IsingVmc(spec)


# ---------------------------------------------------------------------------
# saddle probe


@dataclass(frozen=True)
class SaddleTemplate:
    """Exponential family ``phi = theta^T T(x)`` with a fixed objective f."""

    features: np.ndarray
    f_values: np.ndarray
    name: str = "saddle_probe"

    def build(self) -> TabularProblem:
        return TabularProblem(self.features, self.f_values, log_pi_coef=0.0, name=self.name)


def ring_template(states: int = 6, amplitude: float = 1.0, feature_scale: float = 2.0,
                  harmonic: int = 2) -> SaddleTemplate:
    """States on a ring with first-harmonic features and a higher-harmonic f.

    At theta = 0 the gradient vanishes by orthogonality of the harmonics while
    the Hessian has eigenvalues of both signs.
    """
    if not 3 <= states <= 8:
        raise InvalidProblemError("the saddle probe uses 3 to 8 states")
    angle = 2.0 * np.pi * np.arange(states) / states
    T = feature_scale * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return SaddleTemplate(features=T, f_values=amplitude * np.cos(harmonic * angle))


@dataclass
class SaddleProbeSpec:
    problem: ProblemDefinition
    theta_saddle: np.ndarray
    certificate: dict = field(default_factory=dict)


def certify(problem: ProblemDefinition, theta, epsilon: float) -> dict:
    theta = np.asarray(theta, dtype=float)
    g = exact_gradient(problem, theta)
    curv = exact_hessian(problem, theta)
    pi = exact_pi(problem, theta).weights
    _, var, _ = central_moments(pi, problem.f(theta))
    return {
        "grad_norm": float(np.linalg.norm(g)),
        "lambda_min": curv.lambda_min,
        "sigma2": var,
        "epsilon": float(epsilon),
        "v": [float(c) for c in curv.v],
    }


def find_saddle(template, epsilon: float, search_seed: int = 0, n_starts: int = 32,
                radius: float = 2.0) -> SaddleProbeSpec:
    """Locate a stationary point in the strict-saddle regime.

    Stationary points are found by solving ``g(theta) = 0`` with a
    Levenberg-Marquardt root search (Jacobian = exact Hessian), which
    converges to saddles as readily as to minima. The origin is scanned first,
    then ``n_starts - 1`` Gaussian starts of scale ``radius``.
    """
    from .optimizer import regime_of

    problem = template.build() if isinstance(template, SaddleTemplate) else template
    if problem.dim < 2:
        raise InvalidProblemError("saddle search needs at least two parameters")
    rng = np.random.default_rng(search_seed)
    starts = [np.zeros(problem.dim)] + [radius * rng.standard_normal(problem.dim)
                                        for _ in range(n_starts - 1)]
    stationary_tol = min(1e-10, 1e-3 * epsilon)
    for start in starts:
        sol = least_squares(lambda t: exact_gradient(problem, t), start,
                            jac=lambda t: exact_hessian(problem, t).hessian,
                            method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        cert = certify(problem, sol.x, epsilon)
        if cert["grad_norm"] > stationary_tol:
            continue
        if regime_of(cert["grad_norm"], cert["lambda_min"], cert["sigma2"], epsilon) == "R2":
            # independent re-check from scratch
            again = certify(problem, np.array(sol.x), epsilon)
            label = regime_of(again["grad_norm"], again["lambda_min"], again["sigma2"], epsilon)
            if label != "R2":
                raise SearchFailure(f"certificate did not survive re-verification ({label})")
            return SaddleProbeSpec(problem=problem, theta_saddle=np.array(sol.x), certificate=again)
    raise SearchFailure(f"no R2 stationary point found from {len(starts)} starts "
                        f"at epsilon={epsilon}")
