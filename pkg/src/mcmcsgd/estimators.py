"""MCMC estimators of the objective and its gradient, plus exact oracles.

Objectives have the form ``L(theta) = E_{x ~ pi_theta}[f_theta(x)]`` with
``pi_theta ∝ exp(phi_theta)`` on an enumerable state space. Problems expose
their callables evaluated at *every* state at once, so exact expectations are
weighted sums and sample estimates are computed from visit counts.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .chain_core import (
    Distribution,
    FiniteKernel,
    StateSpace,
    chi_squared_divergence,
    exact_pi,
    spectral_gap,
)
from .errors import CapabilityError, OracleInconsistencyError
from .sampling import ChainRun, SamplerConfig, iter_replica_blocks, state_counts


class ProblemDefinition:
    """Capability bundle for ``L(theta) = E_pi[f_theta]``.

    Subclasses set ``dim`` and ``space`` and implement the state-vectorised
    oracles below. ``phi(theta)[x]`` is the energy of state ``x``; gradient
    arrays have shape ``(|X|, dim)`` and Hessian arrays ``(|X|, dim, dim)``.
    """

    dim: int
    space: StateSpace
    name: str = "problem"

    def phi(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_phi(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def f(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_f(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess_phi(self, theta: np.ndarray) -> np.ndarray:
        raise CapabilityError(f"{self.name} does not provide the Hessian of phi")

    @property
    def has_hess_phi(self) -> bool:
        try:
            self.hess_phi(np.zeros(self.dim))
        except CapabilityError:
            return False
        return True

    def proposal(self) -> FiniteKernel:
        """Symmetric proposal used when building MH kernels for this problem."""
        from .chain_core import uniform_proposal

        return uniform_proposal(self.space)

    def config(self) -> dict:
        return {"name": self.name, "dim": self.dim, "states": self.space.size}


@dataclass
class GradientEstimate:
    grad_hat: np.ndarray
    objective_hat: float
    f_sample_variance: float
    scale: float


@dataclass
class Curvature:
    hessian: np.ndarray
    lambda_min: float
    v: np.ndarray
    asymmetry: float


# ---------------------------------------------------------------------------
# exact oracles


def _theta(theta) -> np.ndarray:
    return np.asarray(theta, dtype=float).reshape(-1)


def exact_objective(problem: ProblemDefinition, theta) -> float:
    theta = _theta(theta)
    pi = exact_pi(problem, theta).weights
    return float(pi @ problem.f(theta))


def gradient_forms(problem: ProblemDefinition, theta) -> tuple[np.ndarray, np.ndarray]:
    """``E[(f - Ef) grad phi]`` and ``E[(f - Ef)(grad phi - E grad phi)]``."""
    theta = _theta(theta)
    pi = exact_pi(problem, theta).weights
    f = problem.f(theta)
    G = problem.grad_phi(theta)
    fc = f - pi @ f
    plain = (pi * fc) @ G
    centered = (pi * fc) @ (G - pi @ G)
    return plain, centered


def exact_gradient(problem: ProblemDefinition, theta) -> np.ndarray:
    """Exact ``g(theta)``; the E[grad f] term vanishes by construction of the problems."""
    plain, centered = gradient_forms(problem, theta)
    tol = 1e-12 * max(1.0, float(np.max(np.abs(plain))))
    if np.max(np.abs(plain - centered)) > tol:
        raise OracleInconsistencyError(
            f"gradient forms disagree by {np.max(np.abs(plain - centered)):.3e}"
        )
    return plain


def score_mean(problem: ProblemDefinition, theta) -> np.ndarray:
    """``E_pi[grad f]``; zero for every admissible problem."""
    theta = _theta(theta)
    pi = exact_pi(problem, theta).weights
    return pi @ problem.grad_f(theta)


def exact_hessian(problem: ProblemDefinition, theta) -> Curvature:
    """Hessian of L from enumeration.

    Uses ``H = E[s grad f^T] + E[f grad^2 log pi] + E[f s s^T]`` with the score
    ``s = grad phi - E grad phi`` and
    ``grad^2 log pi = grad^2 phi - E grad^2 phi - Cov(grad phi)``. The identity
    relies on ``E_pi[grad f] = 0`` holding for all theta.
    """
    theta = _theta(theta)
    Hphi = problem.hess_phi(theta)
    pi = exact_pi(problem, theta).weights
    f = problem.f(theta)
    G = problem.grad_phi(theta)
    Gf = problem.grad_f(theta)
    Ef = pi @ f
    s = G - pi @ G
    cov = (pi[:, None] * s).T @ s
    cross = (pi[:, None] * s).T @ Gf
    f_hess_phi = np.einsum("x,xij->ij", pi * f, Hphi)
    mean_hess_phi = np.einsum("x,xij->ij", pi, Hphi)
    f_log_hess = f_hess_phi - Ef * mean_hess_phi - Ef * cov
    f_score_outer = (pi[:, None] * f[:, None] * s).T @ s
    H = cross + f_log_hess + f_score_outer
    asym = float(np.max(np.abs(H - H.T))) if H.size else 0.0
    H = 0.5 * (H + H.T)
    evals, evecs = np.linalg.eigh(H)
    v = evecs[:, 0]
    # fix the sign so the eigenvector is reproducible
    k = int(np.argmax(np.abs(v)))
    if v[k] < 0:
        v = -v
    return Curvature(hessian=H, lambda_min=float(evals[0]), v=v, asymmetry=asym)


# ---------------------------------------------------------------------------
# sample estimators


def _counts_estimates(f: np.ndarray, G: np.ndarray, counts: np.ndarray, scale: float):
    """Objective, gradient and f-variance estimates for each row of ``counts``."""
    n = counts.sum(axis=1).astype(float)
    freq = counts / n[:, None]
    fbar = freq @ f
    fG = f[:, None] * G
    grad = scale * (freq @ fG - fbar[:, None] * (freq @ G))
    var = np.maximum(freq @ (f * f) - fbar**2, 0.0)
    return fbar, grad, var


def estimate_objective(problem: ProblemDefinition, theta, run: ChainRun) -> float:
    theta = _theta(theta)
    return float(np.mean(problem.f(theta)[np.asarray(run.states, dtype=np.int64)]))


def estimate_gradient(problem: ProblemDefinition, theta, run: ChainRun,
                      scale: float = 1.0) -> GradientEstimate:
    """``scale/|S| * sum_x (f(x) - mean f) grad phi(x)`` over the retained states.

    ``scale=2`` reproduces the estimator with the leading factor 2; the default
    ``scale=1`` targets the exact gradient ``E[(f - Ef) grad phi]``.
    """
    theta = _theta(theta)
    counts = state_counts(np.asarray(run.states)[None, :], problem.space.size)
    fbar, grad, var = _counts_estimates(problem.f(theta), problem.grad_phi(theta), counts, scale)
    return GradientEstimate(grad_hat=grad[0], objective_hat=float(fbar[0]),
                            f_sample_variance=float(var[0]), scale=float(scale))


def replica_gradients(problem: ProblemDefinition, theta, kernel: FiniteKernel,
                      config: SamplerConfig, R: int, scale: float = 1.0):
    """Gradient and objective estimates for R independent replicas.

    Returns ``(grads, objectives)`` with shapes ``(R, dim)`` and ``(R,)``.
    """
    theta = _theta(theta)
    f = problem.f(theta)
    G = problem.grad_phi(theta)
    grads, objs = [], []
    for block in iter_replica_blocks(kernel, config, R):
        counts = state_counts(block, problem.space.size)
        fbar, grad, _ = _counts_estimates(f, G, counts, scale)
        grads.append(grad)
        objs.append(fbar)
    return np.concatenate(grads), np.concatenate(objs)


# ---------------------------------------------------------------------------
# moments and norms


def subexp_norm(weights: np.ndarray, values: np.ndarray, lo: float = 1e-12, hi: float = 1e6,
                rtol: float = 1e-10) -> float:
    """Sub-exponential norm ``inf{t > 0 : E exp(|X|/t) <= 2}`` under ``weights``.

    Geometric bisection on t; returns 0 for X = 0 almost surely and ``hi`` if
    the bracket is exhausted.
    """
    w = np.asarray(weights, dtype=float)
    a = np.abs(np.asarray(values, dtype=float))
    mask = w > 0
    w, a = w[mask], a[mask]
    if np.all(a == 0):
        return 0.0
    logw = np.log(w)
    log2 = math.log(2.0)

    def excess(t: float) -> float:
        z = logw + a / t
        m = z.max()
        return m + math.log(np.exp(z - m).sum()) - log2

    if excess(hi) > 0:
        return hi
    if excess(lo) <= 0:
        return lo
    while hi / lo - 1.0 > rtol:
        mid = math.sqrt(lo * hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return hi


def central_moments(weights: np.ndarray, values: np.ndarray) -> tuple[float, float, float]:
    """Return ``(mean, sigma_2^2, sigma_4)`` of values under weights."""
    w = np.asarray(weights, dtype=float)
    v = np.asarray(values, dtype=float)
    mean = float(w @ v)
    c = v - mean
    var = float(w @ c**2)
    fourth = float(w @ c**4)
    return mean, var, fourth**0.25


# ---------------------------------------------------------------------------
# assumption audit


EPS_VARIANCE_FLOOR = 1e-14


@dataclass
class ThetaAudit:
    theta: list
    M: float
    L2: float
    B: float
    L1: float
    l_g: float
    sigma2: float
    sigma4: float
    lambda_min: float | None
    eta: float | None
    kappa: float | None
    eps_variance: bool


@dataclass
class AssumptionAudit:
    M: float
    L2: float
    B: float
    L1: float
    L_smooth: float
    rho: float
    eta: float | None
    kappa: float | None
    l_g: float
    sigma2: float
    sigma4: float
    flagged: list = field(default_factory=list)
    per_theta: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _audit_one(problem: ProblemDefinition, theta: np.ndarray, curvature: Curvature | None) -> ThetaAudit:
    pi = exact_pi(problem, theta).weights
    f = problem.f(theta)
    G = problem.grad_phi(theta)
    Gf = problem.grad_f(theta)
    mean_f, var_f, sigma4 = central_moments(pi, f)
    M = subexp_norm(pi, f)
    B = float(np.max(np.linalg.norm(G, axis=1)))
    L2 = float(np.sqrt(pi @ np.sum(Gf**2, axis=1)))
    if problem.has_hess_phi:
        Hphi = problem.hess_phi(theta)
        norms = np.array([np.linalg.norm(h, 2) for h in Hphi]) if Hphi.size else np.zeros(len(pi))
        L1 = float(np.sqrt(pi @ norms**2))
    else:
        L1 = 0.0
    fc = f - mean_f
    l_g = float(np.max(np.abs(fc) * np.linalg.norm(G, axis=1)))
    flagged = var_f <= EPS_VARIANCE_FLOOR
    eta = kappa = lam = None
    if curvature is not None:
        lam = curvature.lambda_min
    if not flagged:
        kappa = M / math.sqrt(var_f)
        if curvature is not None:
            proj = (G - pi @ G) @ curvature.v
            eta = float(pi @ (fc * proj) ** 2) / var_f
    return ThetaAudit(theta=[float(t) for t in theta], M=M, L2=L2, B=B, L1=L1, l_g=l_g,
                      sigma2=var_f, sigma4=sigma4, lambda_min=lam, eta=eta, kappa=kappa,
                      eps_variance=bool(flagged))


def assumption_audit(problem: ProblemDefinition, theta_samples) -> AssumptionAudit:
    """Exact constants of the standing assumptions, maximised over ``theta_samples``.

    ``eta`` is minimised (it is a lower bound); points with zero variance of f
    are flagged and excluded from ``eta`` and ``kappa``.
    """
    thetas = [_theta(t) for t in theta_samples]
    if not thetas:
        raise ValueError("theta_samples must not be empty")
    with_hess = problem.has_hess_phi
    curvatures = [exact_hessian(problem, t) if with_hess else None for t in thetas]
    rows = [_audit_one(problem, t, c) for t, c in zip(thetas, curvatures)]
    rho = 0.0
    if with_hess:
        for (t1, c1), (t2, c2) in itertools.combinations(zip(thetas, curvatures), 2):
            dist = np.linalg.norm(t1 - t2)
            if dist > 0:
                rho = max(rho, float(np.linalg.norm(c1.hessian - c2.hessian, 2) / dist))
    M = max(r.M for r in rows)
    L2 = max(r.L2 for r in rows)
    B = max(r.B for r in rows)
    L1 = max(r.L1 for r in rows)
    etas = [r.eta for r in rows if r.eta is not None]
    kappas = [r.kappa for r in rows if r.kappa is not None]
    return AssumptionAudit(
        M=M, L2=L2, B=B, L1=L1,
        L_smooth=smoothness_constant(B, L1, L2, M),
        rho=rho,
        eta=min(etas) if etas else None,
        kappa=max(kappas) if kappas else None,
        l_g=max(r.l_g for r in rows),
        sigma2=max(r.sigma2 for r in rows),
        sigma4=max(r.sigma4 for r in rows),
        flagged=[r.theta for r in rows if r.eps_variance],
        per_theta=[asdict(r) for r in rows],
    )


def smoothness_constant(B: float, L1: float, L2: float, M: float) -> float:
    return B * L1 + 2.0 * M * L2 + 6.0 * M * B**2


# ---------------------------------------------------------------------------
# error bounds for the gradient estimator


def _pos_log(x: float) -> float:
    if x <= 0:
        return 0.0
    return max(math.log(x), 0.0)


@dataclass
class ErrorBoundConstants:
    chi_n0: float
    C: float
    c1: float
    c2: float
    c3: float
    c4: float
    B_bias: float
    V_var: float

    def to_dict(self) -> dict:
        return asdict(self)


def compute_bounds(audit: AssumptionAudit, gamma: float, chi: float, n: int, n0: int,
                   sigma2: float | None = None) -> ErrorBoundConstants:
    """Bias bound ``B_{n,n0}`` and mean-squared-error bound ``V_{n,n0}``.

    ``sigma2`` is the variance of f; it defaults to the audited value.
    """
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if n < 1:
        raise ValueError("n must be positive")
    var = audit.sigma2 if sigma2 is None else sigma2
    M, B = audit.M, audit.B
    chi_n0 = (1.0 - gamma) ** n0 * chi
    C = math.sqrt(1.0 + chi_n0)
    lg = _pos_log(chi_n0)
    c1 = chi_n0 * math.sqrt(var) + 4.0 * M * lg**2 + 4.0 * M * lg
    c2 = 64.0 * (1.0 + math.log(2.0 * C))
    c3 = 100.0 * (16.0 + 4.0 * math.log(2.0 * C)) ** 4
    c4 = 200.0
    B_bias = 4.0 * c1 * B / (n * gamma)
    V = (16.0 * c2 * B**2 * var / (n * gamma)
         + 40.0 * (c3 + c4 * math.log(n) ** 4) * B**2 * M**2 / (n**2 * gamma**2))
    return ErrorBoundConstants(chi_n0=chi_n0, C=C, c1=c1, c2=c2, c3=c3, c4=c4,
                               B_bias=B_bias, V_var=V)


@dataclass
class BiasVarianceMeasurement:
    n: int
    n0: int
    R: int
    scale: float
    gamma: float
    chi: float
    bias: list
    bias_norm: float
    standard_errors: list
    bias_norm_se: float
    mse: float
    mse_se: float
    bound_bias: float
    bound_var: float

    def to_dict(self) -> dict:
        return asdict(self)


def measure_bias_variance(problem: ProblemDefinition, theta, kernel: FiniteKernel,
                          config: SamplerConfig, R: int, scale: float = 1.0
                          ) -> BiasVarianceMeasurement:
    """Monte Carlo estimates of ``||E g_hat - g||`` and ``E||g_hat - g||^2``.

    The target is ``scale * exact_gradient`` so both estimator conventions are
    measured against their own limit.
    """
    if R < 100:
        raise ValueError("measure_bias_variance needs R >= 100 replicas")
    theta = _theta(theta)
    pi = exact_pi(problem, theta)
    report = spectral_gap(kernel, pi)
    nu = config.initial or Distribution.uniform(problem.space)
    chi = chi_squared_divergence(nu, pi)
    g = scale * exact_gradient(problem, theta)
    grads, _ = replica_gradients(problem, theta, kernel, config, R, scale)
    err = grads - g
    mean_err = err.mean(axis=0)
    se = err.std(axis=0, ddof=1) / math.sqrt(R)
    bias_norm = float(np.linalg.norm(mean_err))
    # delta-method standard error of the norm
    if bias_norm > 0:
        bias_norm_se = float(np.sqrt(np.sum((mean_err / bias_norm) ** 2 * se**2)))
    else:
        bias_norm_se = float(np.linalg.norm(se))
    sq = np.sum(err**2, axis=1)
    audit = assumption_audit(problem, [theta])
    bounds = compute_bounds(audit, report.gamma, chi, config.n, config.n0)
    return BiasVarianceMeasurement(
        n=config.n, n0=config.n0, R=R, scale=float(scale), gamma=report.gamma, chi=chi,
        bias=[float(b) for b in mean_err], bias_norm=bias_norm,
        standard_errors=[float(s) for s in se], bias_norm_se=bias_norm_se,
        mse=float(sq.mean()), mse_se=float(sq.std(ddof=1) / math.sqrt(R)),
        bound_bias=bounds.B_bias, bound_var=bounds.V_var,
    )
