"""MCMC-SGD: the iteration, stepsize schedules and saddle-escape experiments."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .chain_core import Distribution, build_mh_kernel
from .errors import DerivationError, DivergenceError, RegimeError
from .estimators import (
    AssumptionAudit,
    ProblemDefinition,
    central_moments,
    compute_bounds,
    estimate_gradient,
    exact_gradient,
    exact_hessian,
    exact_objective,
    exact_pi,
)
from .io import fmt_float
from .sampling import SamplerConfig, num_threads, run_chain

THETA_RADIUS = 1e6
SCHEDULE_KINDS = ("constant", "decaying", "two_phase")


@dataclass(frozen=True)
class Schedule:
    """Stepsize rule.

    ``constant``: ``alpha``; ``decaying``: ``c * sqrt(n) / sqrt(k)`` for
    ``k >= 1``; ``two_phase``: ``beta`` when ``k % T == 0`` and ``alpha``
    otherwise.
    """

    kind: str
    alpha: float = 0.0
    c: float = 0.0
    n: int = 1
    beta: float = 0.0
    T: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if self.kind == "constant" and not self.alpha > 0:
            raise ValueError("constant schedule needs alpha > 0")
        if self.kind == "decaying" and not (self.c > 0 and self.n >= 1):
            raise ValueError("decaying schedule needs c > 0 and n >= 1")
        if self.kind == "two_phase":
            if not self.beta > self.alpha > 0:
                raise ValueError("two-phase schedule needs beta > alpha > 0")
            if int(self.T) != self.T or self.T < 1:
                raise ValueError("two-phase period T must be a positive integer")

    def rate(self, k: int) -> float:
        if self.kind == "constant":
            return self.alpha
        if self.kind == "decaying":
            if k < 1:
                raise ValueError("decaying schedule is indexed from k = 1")
            return self.c * math.sqrt(self.n) / math.sqrt(k)
        return self.beta if k % self.T == 0 else self.alpha

    def for_iteration(self, k: int) -> float:
        """Stepsize of the update ``theta_k -> theta_{k+1}`` (k counted from 0)."""
        return self.rate(k + 1) if self.kind == "decaying" else self.rate(k)


# ---------------------------------------------------------------------------
# regimes


@dataclass(frozen=True)
class RegimeLabel:
    label: str
    grad_norm: float
    lambda_min: float
    sigma2: float


def regime_of(grad_norm: float, lambda_min: float, sigma2: float, epsilon: float) -> str:
    if grad_norm >= epsilon:
        return "R1"
    if lambda_min <= -epsilon**0.25 and sigma2 >= epsilon**0.5:
        return "R2"
    return "R3"


def classify_regime(problem: ProblemDefinition, theta, epsilon: float) -> RegimeLabel:
    theta = np.asarray(theta, dtype=float)
    g = exact_gradient(problem, theta)
    lam = exact_hessian(problem, theta).lambda_min
    pi = exact_pi(problem, theta).weights
    _, var, _ = central_moments(pi, problem.f(theta))
    gn = float(np.linalg.norm(g))
    return RegimeLabel(regime_of(gn, lam, var, epsilon), gn, lam, var)


# ---------------------------------------------------------------------------
# parameter table


@dataclass
class ScheduleParams:
    epsilon: float
    delta: float
    beta: float
    alpha: float
    L_thres: float
    n: int
    n0: int
    T: int
    K: int
    mu: float
    provenance: dict = field(default_factory=dict)
    derived: dict = field(default_factory=dict)
    overridden: dict = field(default_factory=dict)
    consistency: dict = field(default_factory=dict)

    def schedule(self) -> Schedule:
        return Schedule("two_phase", alpha=self.alpha, beta=self.beta, T=self.T)

    def to_dict(self) -> dict:
        return asdict(self)


def _ceil_int(x: float, what: str) -> int:
    if not math.isfinite(x):
        raise DerivationError(f"{what} is not finite ({x})")
    return int(math.ceil(x))


def _round_up_multiple(k: int, T: int) -> int:
    return max(T, -(-k // T) * T)


def derive_table1(epsilon: float, delta: float, audit: AssumptionAudit, gamma: float, chi: float,
                  L_at_theta0: float, L_star: float, override: dict | None = None) -> ScheduleParams:
    """Parameter table for the two-phase schedule.

    ``override`` may fix any of ``beta``, ``alpha``, ``T``, ``K``; the derived
    values are always kept in ``derived``. ``L_thres`` and (unless fixed) ``K``
    are recomputed from the stepsizes actually used.
    """
    if not (0 < epsilon < 1 and 0 < delta < 1):
        raise DerivationError("epsilon and delta must lie in (0, 1)")
    need = {"l_g": audit.l_g, "rho": audit.rho, "L_smooth": audit.L_smooth,
            "eta": audit.eta, "kappa": audit.kappa, "gamma": gamma}
    for key, value in need.items():
        if value is None or not value > 0:
            raise DerivationError(f"audited constant {key} must be positive, got {value}")
    if L_at_theta0 < L_star:
        raise DerivationError("L(theta0) is below the supplied global minimum L*")
    l_g, rho, L, eta, kappa = audit.l_g, audit.rho, audit.L_smooth, audit.eta, audit.kappa

    n = max(1, _ceil_int(eta * gamma / (64.0 * epsilon), "n"))
    log_chi = math.log(chi) if chi > 0 else -math.inf
    n0_raw = (2.0 / gamma) * (log_chi + math.log(2.0 * kappa) + math.log(n))
    n0 = max(0, _ceil_int(n0_raw, "n0")) if math.isfinite(n0_raw) else 0
    bounds = compute_bounds(audit, gamma, chi, n, n0)
    V, Bb = bounds.V_var, bounds.B_bias
    mu = eta * gamma / (16.0 * n)

    beta = delta * epsilon**2 / (192.0 * l_g * rho * L * V)
    log_term = math.log(rho * l_g * L * V / (mu * delta * epsilon))
    T = max(1, _ceil_int(log_term**2 / (beta**2 * math.sqrt(epsilon)), "T"))
    alpha = beta / math.sqrt(T)
    L_thres = beta * epsilon**2 / (192.0 * rho * l_g)
    gap = L_at_theta0 - L_star
    K = _round_up_multiple(_ceil_int(2.0 * gap * T / (delta * L_thres), "K"), T)
    derived = {"beta": beta, "alpha": alpha, "L_thres": L_thres, "n": n, "n0": n0, "T": T, "K": K}

    override = dict(override or {})
    unknown = set(override) - {"beta", "alpha", "T", "K"}
    if unknown:
        raise DerivationError(f"unknown override keys: {sorted(unknown)}")
    if "beta" in override:
        beta = float(override["beta"])
    if "T" in override:
        T = int(override["T"])
    alpha = float(override["alpha"]) if "alpha" in override else beta / math.sqrt(T)
    L_thres = beta * epsilon**2 / (192.0 * rho * l_g)
    if "K" in override:
        K = int(override["K"])
    else:
        K = _round_up_multiple(_ceil_int(2.0 * gap * T / (delta * L_thres), "K"), T)

    provenance = {"l_g": l_g, "rho": rho, "L": L, "V": V, "B_bias": Bb, "eta": eta,
                  "gamma": gamma, "kappa": kappa, "chi": chi, "L0_minus_Lstar": gap}
    params = ScheduleParams(epsilon=epsilon, delta=delta, beta=beta, alpha=alpha, L_thres=L_thres,
                            n=n, n0=n0, T=T, K=K, mu=mu, provenance=provenance,
                            derived=derived, overridden=override)
    params.consistency = side_conditions(params, L=L, V=V, B_bias=Bb, l_g=l_g, rho=rho)
    return params


def side_conditions(p: ScheduleParams, L: float, V: float, B_bias: float, l_g: float,
                    rho: float) -> dict:
    """Which of the large-gradient and saddle-regime side conditions hold.

    The saddle-regime conditions use the weakest curvature and variance
    allowed in R2: ``lambda_0 = epsilon^{1/4}`` and ``sigma^2 = epsilon^{1/2}``.
    """
    eps, beta, alpha, T = p.epsilon, p.beta, p.alpha, p.T
    lam0 = eps**0.25
    var = eps**0.5
    mu = p.mu
    return {
        "R1_beta": beta <= eps**2 / (8.0 * L * V),
        "R1_bias": B_bias**2 <= eps**2 / (8.0 * math.sqrt(T)),
        "R1_Lthres": p.L_thres <= beta * eps**2 / 4.0,
        "R2_Lthres": p.L_thres <= mu * var * lam0 * min(beta * lam0, 1.0) / (192.0 * l_g * rho),
        "R2_bias": B_bias**2 <= (mu * beta * var * lam0 * min(beta * T * lam0, 1.0)
                                 / (384.0 * alpha * T**2 * l_g * rho)),
        "R2_beta": beta <= mu * var * lam0**2 * L / (384.0 * l_g * rho * L * V),
        "table_bias": B_bias <= math.sqrt(eps**2 / (96.0 * T**1.5 * l_g * rho)),
        "beta_sq_T_alpha_sq": math.isclose(beta**2, T * alpha**2, rel_tol=1e-9),
        "Lthres_covers_drift": p.L_thres >= (2.0 * T * alpha * B_bias**2
                                             + 2.0 * beta**2 * L * V) / p.delta,
    }


# ---------------------------------------------------------------------------
# the SGD loop


ITER_FIELDS = ("k", "alpha", "L", "grad_norm", "L_hat", "grad_hat_norm")
PERIOD_FIELDS = ("m", "k", "lambda_min", "sigma2", "grad_norm", "regime")


@dataclass
class RunRecord:
    iterations: list = field(default_factory=list)
    periods: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def thetas(self) -> np.ndarray:
        return np.array([row["theta"] for row in self.iterations])

    @property
    def losses(self) -> np.ndarray:
        return np.array([row["L"] for row in self.iterations])

    @property
    def grad_sq(self) -> np.ndarray:
        return np.array([row["grad_norm"] ** 2 for row in self.iterations])

    def running_min_grad_sq(self) -> np.ndarray:
        return np.minimum.accumulate(self.grad_sq)

    def summary(self) -> dict:
        g2 = self.grad_sq
        return {
            "min_grad_sq": float(g2.min()) if g2.size else None,
            "final_L": self.iterations[-1]["L"] if self.iterations else None,
            "final_theta": self.iterations[-1]["theta"] if self.iterations else None,
            "regime_history": [row["regime"] for row in self.periods],
            "params": self.config,
            "seed": self.config.get("seed"),
        }

    def write_csv(self, path) -> None:
        dim = len(self.iterations[0]["theta"]) if self.iterations else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(ITER_FIELDS) + [f"theta_{i}" for i in range(dim)])
            for row in self.iterations:
                w.writerow([row["k"]] + [fmt_float(row[c]) for c in ITER_FIELDS[1:]]
                           + [fmt_float(t) for t in row["theta"]])

    def write_periods_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PERIOD_FIELDS)
            for row in self.periods:
                w.writerow([row["m"], row["k"], fmt_float(row["lambda_min"]),
                            fmt_float(row["sigma2"]), fmt_float(row["grad_norm"]), row["regime"]])


def _period_row(problem, theta, m, k, epsilon) -> dict:
    lam = exact_hessian(problem, theta).lambda_min if problem.has_hess_phi else math.nan
    pi = exact_pi(problem, theta).weights
    _, var, _ = central_moments(pi, problem.f(theta))
    gn = float(np.linalg.norm(exact_gradient(problem, theta)))
    regime = regime_of(gn, lam, var, epsilon) if epsilon is not None else ""
    return {"m": m, "k": k, "lambda_min": lam, "sigma2": var, "grad_norm": gn, "regime": regime}


def sgd_run(problem: ProblemDefinition, theta0, schedule: Schedule, sampler_template: SamplerConfig,
            K: int, seed: int, scale: float = 1.0, epsilon: float | None = None,
            period: int | None = None, warm_start: bool = False) -> RunRecord:
    """Run K iterations of ``theta_{k+1} = theta_k - alpha_k g_hat(theta_k, S_k)``.

    At every iteration the MH kernel is rebuilt at ``theta_k`` and a fresh
    chain is drawn from the stream ``(seed, k)``. Exact ``L`` and ``||g||``
    are recorded at every iterate; curvature, variance and regime labels at
    every ``period``-th iterate (defaults to the schedule's T for two-phase
    runs and to K otherwise).
    """
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K!r}")
    if schedule.kind == "two_phase" and K % schedule.T:
        raise ValueError("two-phase runs need K to be a multiple of T")
    if period is None:
        period = schedule.T if schedule.kind == "two_phase" else K
    theta = np.array(theta0, dtype=float).reshape(-1)
    proposal = problem.proposal()
    base = sampler_template.with_(seed=int(seed))
    record = RunRecord(config={
        "problem": problem.config(), "theta0": theta.tolist(), "schedule": asdict(schedule),
        "sampler": {"n": base.n, "n0": base.n0,
                    "initial": None if base.initial is None else base.initial.weights.tolist()},
        "K": int(K), "seed": int(seed), "scale": float(scale), "epsilon": epsilon,
        "period": int(period), "warm_start": bool(warm_start),
    })
    last_state = None
    for k in range(K + 1):
        L = exact_objective(problem, theta)
        gn = float(np.linalg.norm(exact_gradient(problem, theta)))
        row = {"k": k, "theta": theta.tolist(), "alpha": math.nan, "L": L, "grad_norm": gn,
               "L_hat": math.nan, "grad_hat_norm": math.nan}
        record.iterations.append(row)
        if k % period == 0:
            record.periods.append(_period_row(problem, theta, k // period, k, epsilon))
        if k == K:
            break
        config = base
        if warm_start and last_state is not None:
            config = base.with_(initial=Distribution.point_mass(problem.space, last_state))
        kernel = build_mh_kernel(problem, theta, proposal)
        run = run_chain(kernel, config, replica_id=k)
        last_state = int(run.states[-1])
        est = estimate_gradient(problem, theta, run, scale)
        step = schedule.for_iteration(k)
        row.update(alpha=step, L_hat=est.objective_hat,
                   grad_hat_norm=float(np.linalg.norm(est.grad_hat)))
        theta = theta - step * est.grad_hat
        if not np.all(np.isfinite(theta)) or np.linalg.norm(theta) > THETA_RADIUS:
            raise DivergenceError(f"iterate left the admissible region at k={k + 1}", record)
    return record


# ---------------------------------------------------------------------------
# saddle escape


@dataclass
class EscapeResult:
    L_saddle: float
    L_thres: float
    decreases: list
    success_fraction: float
    mean_decrease: float
    control_decrease: float
    control_success: bool
    seeds: list
    params: dict

    def to_dict(self) -> dict:
        return asdict(self)


def require_saddle_regime(problem: ProblemDefinition, theta, epsilon: float) -> RegimeLabel:
    """Raise :class:`RegimeError` naming the failed tests unless theta is in R2."""
    label = classify_regime(problem, theta, epsilon)
    if label.label != "R2":
        failed = []
        if label.grad_norm >= epsilon:
            failed.append("||g|| < epsilon")
        if label.lambda_min > -epsilon**0.25:
            failed.append("lambda_min <= -epsilon^(1/4)")
        if label.sigma2 < epsilon**0.5:
            failed.append("sigma2 >= epsilon^(1/2)")
        raise RegimeError(f"start point is in {label.label}, not R2; failed: {', '.join(failed)}",
                          label.label)
    return label


def exact_gd_period(problem: ProblemDefinition, theta, schedule: Schedule, steps: int) -> np.ndarray:
    theta = np.array(theta, dtype=float)
    for k in range(steps):
        theta = theta - schedule.for_iteration(k) * exact_gradient(problem, theta)
    return theta


def escape_experiment(problem: ProblemDefinition, theta_saddle, params: ScheduleParams, seeds,
                      scale: float = 1.0, initial: Distribution | None = None) -> EscapeResult:
    """One two-phase period from a certified saddle, for each seed.

    Success means ``L(theta_0) - L(theta_T) >= L_thres``. A deterministic
    run with the exact gradient and the same stepsizes serves as control.
    """
    theta_saddle = np.asarray(theta_saddle, dtype=float)
    require_saddle_regime(problem, theta_saddle, params.epsilon)
    schedule = params.schedule()
    sampler = SamplerConfig(n=params.n, n0=params.n0, initial=initial)
    L0 = exact_objective(problem, theta_saddle)

    def one(seed):
        rec = sgd_run(problem, theta_saddle, schedule, sampler, params.T, seed, scale=scale)
        return L0 - rec.iterations[-1]["L"]

    seeds = [int(s) for s in seeds]
    threads = num_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            decreases = list(pool.map(one, seeds))
    else:
        decreases = [one(s) for s in seeds]
    control = L0 - exact_objective(problem, exact_gd_period(problem, theta_saddle, schedule, params.T))
    wins = sum(d >= params.L_thres for d in decreases)
    return EscapeResult(
        L_saddle=L0, L_thres=params.L_thres, decreases=[float(d) for d in decreases],
        success_fraction=wins / len(seeds), mean_decrease=float(np.mean(decreases)),
        control_decrease=float(control), control_success=bool(control >= params.L_thres),
        seeds=seeds, params=params.to_dict(),
    )
