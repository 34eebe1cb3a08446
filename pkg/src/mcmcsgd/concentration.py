"""Monte Carlo checks of the concentration inequalities for Markov chain averages.

Every check compares a replica-level empirical quantity against a bound
evaluated with exactly enumerated constants (variance, sub-exponential norm,
spectral gap, chi divergence). One-sided bounds are declared violated only
when the empirical value exceeds them by more than three standard errors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .chain_core import Distribution, FiniteKernel, chi_squared_divergence, spectral_gap
from .errors import PreconditionError
from .estimators import (
    EPS_VARIANCE_FLOOR,
    ProblemDefinition,
    central_moments,
    exact_hessian,
    exact_pi,
    replica_gradients,
    subexp_norm,
)
from .sampling import SamplerConfig, iter_replica_blocks, state_counts

N_SE = 3.0


def _initial(kernel: FiniteKernel, config: SamplerConfig) -> Distribution:
    return config.initial or Distribution.uniform(kernel.space)


def burned_in_chi(kernel: FiniteKernel, config: SamplerConfig, pi: Distribution) -> float:
    """chi(nu P^{n0}, pi): the divergence of the first retained state."""
    return chi_squared_divergence(kernel.step(_initial(kernel, config), config.n0), pi)


def replica_means(kernel: FiniteKernel, config: SamplerConfig, R: int, h) -> np.ndarray:
    """Sample mean of ``h`` along each of R replicas."""
    h = np.asarray(h, dtype=float)
    out = [state_counts(block, kernel.space.size) @ h / config.n
           for block in iter_replica_blocks(kernel, config, R)]
    return np.concatenate(out)


def _pos_log(x: float) -> float:
    return max(math.log(x), 0.0) if x > 0 else 0.0


@dataclass(frozen=True)
class ChainConstants:
    """Exact constants of ``h`` under ``pi`` that enter the bounds."""

    mean: float
    sigma2: float
    sigma4: float
    M: float
    gamma: float
    chi: float

    @classmethod
    def compute(cls, kernel: FiniteKernel, pi: Distribution, h, chi: float) -> "ChainConstants":
        w = pi.weights
        mean, var, s4 = central_moments(w, h)
        M = subexp_norm(w, np.asarray(h, dtype=float) - mean)
        return cls(mean=mean, sigma2=var, sigma4=s4, M=M, gamma=spectral_gap(kernel, pi).gamma,
                   chi=chi)


def verdict(check: str, params: dict, passed: bool, margin: float) -> dict:
    return {"check": check, "params": params, "pass": bool(passed), "margin": float(margin)}


# ---------------------------------------------------------------------------
# sub-exponential tail bound


def tail_threshold(n: int, M: float) -> float:
    return 10.0 * M * math.log(n) ** 2 / n


def tail_bound(s, n: int, gamma: float, sigma2: float, M: float, chi: float):
    """``2C exp(-gamma n s^2 / (64 sigma^2)) + 2C exp(-sqrt(gamma n s / (160 M)))``.

    ``sigma2`` is the variance of h and ``C = (1 + chi^2)^{1/2}``.
    """
    s = np.asarray(s, dtype=float)
    C = math.sqrt(1.0 + chi**2)
    with np.errstate(divide="ignore"):
        gauss = np.exp(-gamma * n * s**2 / (64.0 * sigma2)) if sigma2 > 0 else np.zeros_like(s)
        expo = np.exp(-np.sqrt(gamma * n * s / (160.0 * M))) if M > 0 else np.zeros_like(s)
    return 2.0 * C * gauss + 2.0 * C * expo


@dataclass
class TailCheckReport:
    s_grid: list
    empirical_tail: list
    standard_errors: list
    bound_values: list
    skipped: list
    violations: list
    threshold: float
    constants: dict
    n: int
    n0: int
    R: int

    @property
    def passed(self) -> bool:
        return not self.violations

    def csv_rows(self):
        header = ["s", "empirical_tail", "standard_error", "bound", "skipped"]
        rows = zip(self.s_grid, self.empirical_tail, self.standard_errors, self.bound_values,
                   self.skipped)
        return header, list(rows)

    def verdict(self) -> dict:
        margins = [b + N_SE * se - e for e, se, b, sk in zip(
            self.empirical_tail, self.standard_errors, self.bound_values, self.skipped) if not sk]
        return verdict("tail_bound", {"n": self.n, "n0": self.n0, "R": self.R,
                                      "threshold": self.threshold, **self.constants},
                       self.passed, min(margins) if margins else math.inf)

    def to_dict(self) -> dict:
        return asdict(self)


def tail_bound_check(kernel: FiniteKernel, pi: Distribution, h, config: SamplerConfig, R: int,
                     s_grid) -> TailCheckReport:
    """Empirical ``P(|mean h - E_pi h| >= s)`` against the sub-exponential tail bound.

    Grid points below the validity threshold ``10 M (log n)^2 / n`` are
    flagged as skipped rather than failed.
    """
    h = np.asarray(h, dtype=float)
    const = ChainConstants.compute(kernel, pi, h, burned_in_chi(kernel, config, pi))
    dev = np.abs(replica_means(kernel, config, R, h) - const.mean)
    s = np.asarray(s_grid, dtype=float)
    emp = (dev[None, :] >= s[:, None]).mean(axis=1)
    se = np.sqrt(emp * (1.0 - emp) / R)
    bound = tail_bound(s, config.n, const.gamma, const.sigma2, const.M, const.chi)
    thr = tail_threshold(config.n, const.M)
    skipped = s < thr
    violations = [(float(si), float(e), float(b), float(sd))
                  for si, e, b, sd, sk in zip(s, emp, bound, se, skipped)
                  if not sk and e > b + N_SE * sd]
    return TailCheckReport(
        s_grid=s.tolist(), empirical_tail=emp.tolist(), standard_errors=se.tolist(),
        bound_values=bound.tolist(), skipped=skipped.tolist(), violations=violations,
        threshold=thr, constants=asdict(const), n=config.n, n0=config.n0, R=R,
    )


# ---------------------------------------------------------------------------
# bias and variance of the chain average


def check_constants(chi: float, sigma2: float, M: float) -> dict:
    """Constants of the bias/variance bound for a single chain average."""
    C = math.sqrt(1.0 + chi**2)
    lg = _pos_log(chi)
    return {
        "C": C,
        "c1": math.sqrt(sigma2) * min(1.0, chi) + 4.0 * M * lg**2 + 4.0 * M * lg,
        "c2": 64.0 * (1.0 + math.log(2.0 * C)),
        "c3": 100.0 * (16.0 + 4.0 * math.log(2.0 * C)) ** 4,
        "c4": 200.0,
    }


@dataclass
class BiasVarianceCheck:
    n: int
    n0: int
    R: int
    constants: dict
    bound_constants: dict
    bias: float
    bias_se: float
    bias_bound: float
    second_moment: float
    second_moment_se: float
    variance_bound: float
    pass_bias: bool
    pass_variance: bool

    @property
    def passed(self) -> bool:
        return self.pass_bias and self.pass_variance

    def csv_rows(self):
        header = ["n", "n0", "bias", "bias_se", "bias_bound", "second_moment",
                  "second_moment_se", "variance_bound"]
        return header, [(self.n, self.n0, self.bias, self.bias_se, self.bias_bound,
                         self.second_moment, self.second_moment_se, self.variance_bound)]

    def verdict(self) -> dict:
        margin = min(self.bias_bound + N_SE * self.bias_se - abs(self.bias),
                     self.variance_bound + N_SE * self.second_moment_se - self.second_moment)
        return verdict("bias_variance", {"n": self.n, "n0": self.n0, "R": self.R,
                                         **self.constants}, self.passed, margin)

    def to_dict(self) -> dict:
        return asdict(self)


def bias_variance_bound_check(kernel: FiniteKernel, pi: Distribution, h, config: SamplerConfig,
                              R: int) -> BiasVarianceCheck:
    """Empirical bias and mean-square error of the chain average of ``h``.

    The bounds are ``c1/(n gamma)`` for the bias and
    ``c2 sigma^2/(n gamma) + (c3 + c4 log^4 n) M^2/(n gamma)^2`` for the
    mean-square error, with the divergence of the first retained state.
    """
    h = np.asarray(h, dtype=float)
    const = ChainConstants.compute(kernel, pi, h, burned_in_chi(kernel, config, pi))
    err = replica_means(kernel, config, R, h) - const.mean
    n, g = config.n, const.gamma
    lem = check_constants(const.chi, const.sigma2, const.M)
    bias_bound = lem["c1"] / (n * g)
    var_bound = (lem["c2"] * const.sigma2 / (n * g)
                 + (lem["c3"] + lem["c4"] * math.log(n) ** 4) * const.M**2 / (n * g) ** 2)
    bias = float(err.mean())
    bias_se = float(err.std(ddof=1) / math.sqrt(R))
    sq = err**2
    sm = float(sq.mean())
    sm_se = float(sq.std(ddof=1) / math.sqrt(R))
    return BiasVarianceCheck(
        n=n, n0=config.n0, R=R, constants=asdict(const), bound_constants=lem,
        bias=bias, bias_se=bias_se, bias_bound=bias_bound,
        second_moment=sm, second_moment_se=sm_se, variance_bound=var_bound,
        pass_bias=abs(bias) <= bias_bound + N_SE * bias_se,
        pass_variance=sm <= var_bound + N_SE * sm_se,
    )


# ---------------------------------------------------------------------------
# second-moment lower bound


@dataclass
class SecondMomentCheck:
    n: int
    n0: int
    R: int
    constants: dict
    second_moment: float
    standard_error: float
    lower_bound: float
    passed: bool

    def csv_rows(self):
        header = ["n", "n0", "second_moment", "standard_error", "lower_bound", "pass"]
        return header, [(self.n, self.n0, self.second_moment, self.standard_error,
                         self.lower_bound, self.passed)]

    def verdict(self) -> dict:
        margin = self.second_moment + N_SE * self.standard_error - self.lower_bound
        return verdict("second_moment", {"n": self.n, "n0": self.n0, "R": self.R,
                                         **self.constants}, self.passed, margin)

    def to_dict(self) -> dict:
        return asdict(self)


def second_moment_preconditions(gamma: float, chi: float, sigma2: float, sigma4: float,
                                n: int, n0: int) -> list[str]:
    """Names of the violated sample-size conditions (empty when all hold)."""
    failed = []
    if sigma2 <= EPS_VARIANCE_FLOOR:
        failed.append("sigma_2[h] > 0")
        return failed
    if n < 32.0 / gamma**3:
        failed.append(f"n >= 32/gamma^3 (n = {n}, 32/gamma^3 = {32.0 / gamma**3:.6g})")
    if chi > 0:
        need = (2.0 / gamma) * (math.log(chi) + math.log(sigma4 / math.sqrt(sigma2)) + math.log(n))
        if n0 < need:
            failed.append("n0 >= (2/gamma)(log chi + log(sigma_4/sigma_2) + log n) "
                          f"(n0 = {n0}, bound = {need:.6g})")
    return failed


def second_moment_check(kernel: FiniteKernel, pi: Distribution, h, n: int, n0: int, R: int,
                        initial: Distribution | None = None, seed: int = 0) -> SecondMomentCheck:
    """Empirical ``E[(mean h)^2]`` against the lower bound ``(gamma/4n) E_pi[h^2]``."""
    h = np.asarray(h, dtype=float)
    config = SamplerConfig(n=n, n0=n0, initial=initial, seed=seed)
    nu = _initial(kernel, config)
    const = ChainConstants.compute(kernel, pi, h, chi_squared_divergence(nu, pi))
    failed = second_moment_preconditions(const.gamma, const.chi, const.sigma2, const.sigma4,
                                         n, n0)
    if failed:
        raise PreconditionError("second-moment check preconditions violated: " + "; ".join(failed))
    sq = replica_means(kernel, config, R, h) ** 2
    sm = float(sq.mean())
    se = float(sq.std(ddof=1) / math.sqrt(R))
    lower = const.gamma / (4.0 * n) * float(pi.weights @ h**2)
    return SecondMomentCheck(n=n, n0=n0, R=R, constants=asdict(const), second_moment=sm,
                             standard_error=se, lower_bound=lower,
                             passed=sm >= lower - N_SE * se)


# ---------------------------------------------------------------------------
# correlated negative curvature


@dataclass
class CncReport:
    second_moment: float
    standard_error: float
    mu_16: float
    mu_32: float
    sigma2: float
    eta: float | None
    gamma: float
    n: int
    n0: int
    R: int
    pass_16: bool
    pass_32: bool
    skipped: bool = False
    n0_condition: bool = True
    v: list = field(default_factory=list)

    def csv_rows(self):
        header = ["n", "n0", "second_moment", "standard_error", "mu_16_sigma2", "mu_32_sigma2",
                  "pass_16", "pass_32"]
        return header, [(self.n, self.n0, self.second_moment, self.standard_error,
                         self.mu_16 * self.sigma2, self.mu_32 * self.sigma2,
                         self.pass_16, self.pass_32)]

    def verdict(self) -> dict:
        margin = self.second_moment + N_SE * self.standard_error - self.mu_32 * self.sigma2
        return verdict("cnc", {"n": self.n, "n0": self.n0, "R": self.R, "eta": self.eta,
                               "gamma": self.gamma, "sigma2": self.sigma2,
                               "pass_16": self.pass_16, "skipped": self.skipped},
                       self.pass_32, margin)

    def to_dict(self) -> dict:
        return asdict(self)


def cnc_eta(problem: ProblemDefinition, theta, v) -> float:
    """``E[(f - Ef)^2 (v^T (grad phi - E grad phi))^2] / sigma^2`` at theta."""
    pi = exact_pi(problem, theta).weights
    f = problem.f(theta)
    G = problem.grad_phi(theta)
    fc = f - pi @ f
    proj = (G - pi @ G) @ np.asarray(v, dtype=float)
    return float(pi @ (fc * proj) ** 2) / float(pi @ fc**2)


def cnc_check(problem: ProblemDefinition, theta, kernel: FiniteKernel, config: SamplerConfig,
              R: int, scale: float = 1.0, eta: float | None = None) -> CncReport:
    """Empirical ``E[(v^T g_hat)^2]`` along the most negative curvature direction.

    Compared against ``mu sigma^2`` with ``mu = eta gamma/(16 n)`` and with
    the halved constant ``eta gamma/(32 n)``. ``eta`` defaults to its exact
    value at ``theta``.
    """
    theta = np.asarray(theta, dtype=float)
    pi = exact_pi(problem, theta)
    _, var, _ = central_moments(pi.weights, problem.f(theta))
    v = exact_hessian(problem, theta).v
    gamma = spectral_gap(kernel, pi).gamma
    n = config.n
    if var <= EPS_VARIANCE_FLOOR:
        return CncReport(second_moment=0.0, standard_error=0.0, mu_16=math.nan, mu_32=math.nan,
                         sigma2=var, eta=None, gamma=gamma, n=n, n0=config.n0, R=R,
                         pass_16=False, pass_32=False, skipped=True, v=v.tolist())
    if eta is None:
        eta = cnc_eta(problem, theta, v)
    chi = chi_squared_divergence(_initial(kernel, config), pi)
    M = subexp_norm(pi.weights, problem.f(theta) - pi.weights @ problem.f(theta))
    kappa = M / math.sqrt(var)
    n0_cond = chi == 0 or config.n0 >= (2.0 / gamma) * (
        math.log(chi) + math.log(2.0 * kappa) + math.log(n))
    grads, _ = replica_gradients(problem, theta, kernel, config, R, scale)
    proj2 = (grads @ v) ** 2
    sm = float(proj2.mean())
    se = float(proj2.std(ddof=1) / math.sqrt(R))
    mu16 = eta * gamma / (16.0 * n)
    mu32 = eta * gamma / (32.0 * n)
    return CncReport(second_moment=sm, standard_error=se, mu_16=mu16, mu_32=mu32, sigma2=var,
                     eta=eta, gamma=gamma, n=n, n0=config.n0, R=R,
                     pass_16=sm >= mu16 * var - N_SE * se, pass_32=sm >= mu32 * var - N_SE * se,
                     n0_condition=bool(n0_cond), v=v.tolist())
