"""Command-line harness: ``mcmcsgd <command> --config FILE [--seed S] [--out DIR]``.

Exit status is 0 on success, 1 when a check fails and 2 on any error; errors
are reported as one JSON object on stderr and in ``<out>/error.json``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .chain_core import (
    Distribution,
    build_mh_kernel,
    chi_squared_divergence,
    exact_pi,
    spectral_gap,
    stationary_distribution,
)
from .concentration import (
    bias_variance_bound_check,
    cnc_check,
    second_moment_check,
    tail_bound_check,
)
from .config import (
    ExperimentConfig,
    build_problem,
    initial_distribution,
    kernel_of,
    load_config,
    saddle_template,
    sampler_config,
    schedule_of,
    theta_of,
    validate_for,
)
from .errors import ConfigError, DivergenceError, MCMCSGDError
from .estimators import assumption_audit, exact_objective, measure_bias_variance
from .io import summary_doc, write_csv, write_json
from .optimizer import derive_table1, escape_experiment, require_saddle_regime, sgd_run
from .problems import find_saddle

COMMANDS = {
    "audit": "estimate smoothness and moment constants over a theta region",
    "bounds": "measure estimator bias and MSE against the derived bounds",
    "concentration": "run a tail, bias/variance, second-moment or CNC check",
    "sgd": "run MCMC-SGD and write the iterate trace",
    "escape": "two-phase escape experiment from a certified saddle",
    "spectral": "spectral gap and stationary law of a kernel",
}
EXIT_OK, EXIT_CHECK_FAILED, EXIT_ERROR = 0, 1, 2


class Context:
    def __init__(self, command: str, cfg: ExperimentConfig, seed: int | None, out: Path):
        self.command = command
        self.cfg = cfg
        self.seed = seed
        self.out = out

    def resolved(self) -> dict:
        doc = json.loads(json.dumps(self.cfg.resolved(), default=str))
        if self.seed is not None:
            doc.setdefault("sampler", {})["seed"] = self.seed
        doc.setdefault("output", {})["dir"] = str(self.out)
        return doc

    def summary(self, result: dict, name: str = "summary.json") -> None:
        write_json(self.out / name, summary_doc(self.command, self.resolved(), result))


def _audit_thetas(cfg: ExperimentConfig, problem, center) -> list:
    explicit = cfg.get("audit.thetas")
    if explicit is not None:
        return [np.asarray(t, dtype=float) for t in explicit]
    count = int(cfg.get("audit.count", 8))
    radius = float(cfg.get("audit.radius", 1.0))
    rng = np.random.default_rng(int(cfg.get("audit.seed", 0)))
    return [center] + [center + rng.uniform(-radius, radius, problem.dim) for _ in range(count)]


def _kernel_and_pi(ctx: Context):
    cfg = ctx.cfg
    if cfg.has("kernel"):
        kernel = kernel_of(cfg)
        return kernel, stationary_distribution(kernel)
    problem = build_problem(cfg)
    theta = theta_of(cfg, problem)
    return build_mh_kernel(problem, theta, problem.proposal()), exact_pi(problem, theta)


def cmd_spectral(ctx: Context) -> int:
    kernel, pi = _kernel_and_pi(ctx)
    report = spectral_gap(kernel, pi)
    write_csv(ctx.out / "spectral.csv", ["state", "pi"], enumerate(pi.weights))
    ctx.summary(report.to_dict())
    return EXIT_OK


def cmd_audit(ctx: Context) -> int:
    problem = build_problem(ctx.cfg)
    thetas = _audit_thetas(ctx.cfg, problem, theta_of(ctx.cfg, problem))
    audit = assumption_audit(problem, thetas)
    fields = ["M", "L2", "B", "L1", "l_g", "sigma2", "sigma4", "lambda_min", "eta", "kappa",
              "eps_variance"]
    rows = [[i] + [np.nan if r[k] is None else r[k] for k in fields]
            for i, r in enumerate(audit.per_theta)]
    write_csv(ctx.out / "audit.csv", ["index"] + fields, rows)
    result = audit.to_dict()
    result["eps_variance_flagged"] = bool(audit.flagged)
    ctx.summary(result)
    return EXIT_OK


def cmd_bounds(ctx: Context) -> int:
    cfg = ctx.cfg
    problem = build_problem(cfg)
    theta = theta_of(cfg, problem)
    base = sampler_config(cfg, problem.space, ctx.seed)
    kernel = build_mh_kernel(problem, theta, problem.proposal())
    R = int(cfg.get("check.R"))
    scale = float(cfg.get("check.scale", 1.0))
    n_grid = cfg.get("check.n_grid", [base.n])
    n0_grid = cfg.get("check.n0_grid", [base.n0])
    rows, records, ok = [], [], True
    for n in n_grid:
        for n0 in n0_grid:
            m = measure_bias_variance(problem, theta, kernel, base.with_(n=int(n), n0=int(n0)),
                                      R, scale)
            passed = m.mse <= m.bound_var + 3.0 * m.mse_se
            ok &= passed
            rows.append([m.n, m.n0, m.bias_norm, m.mse, m.bound_bias, m.bound_var, m.mse_se,
                         m.bias_norm_se])
            records.append({**m.to_dict(), "pass_variance": passed})
    write_csv(ctx.out / "bounds.csv",
              ["n", "n0", "bias_norm", "mse", "bound_bias", "bound_var", "se", "bias_norm_se"], rows)
    ctx.summary({"check": "bias_variance_sweep", "pass": ok, "measurements": records})
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_concentration(ctx: Context) -> int:
    cfg = ctx.cfg
    kind = cfg.get("check.kind")
    R = int(cfg.get("check.R"))
    if kind == "cnc":
        problem = build_problem(cfg)
        theta = theta_of(cfg, problem)
        kernel = build_mh_kernel(problem, theta, problem.proposal())
        config = sampler_config(cfg, problem.space, ctx.seed)
        reports = [cnc_check(problem, theta, kernel, config, R,
                             float(cfg.get("check.scale", 1.0)))]
    else:
        kernel, pi = _kernel_and_pi(ctx)
        h = np.asarray(cfg.get("check.h", required=True), dtype=float)
        if h.shape != (kernel.space.size,):
            cfg.fail("check.h needs one value per state", "check.h")
        if kind == "second_moment":
            settings = cfg.get("check.settings", required=True)
            initial = initial_distribution(cfg, kernel.space)
            seed = ctx.seed if ctx.seed is not None else int(cfg.get("sampler.seed", 0))
            reports = [second_moment_check(kernel, pi, h, int(n), int(n0), R, initial, seed)
                       for n, n0 in settings]
        else:
            config = sampler_config(cfg, kernel.space, ctx.seed)
            if kind == "tail":
                grid = cfg.get("check.s_grid", required=True)
                reports = [tail_bound_check(kernel, pi, h, config, R, grid)]
            else:
                reports = [bias_variance_bound_check(kernel, pi, h, config, R)]
    header, rows = reports[0].csv_rows()
    for rep in reports[1:]:
        rows += rep.csv_rows()[1]
    write_csv(ctx.out / f"{kind}.csv", header, rows)
    verdicts = [rep.verdict() for rep in reports]
    ok = all(v["pass"] for v in verdicts)
    ctx.summary({"check": kind, "pass": ok, "verdicts": verdicts,
                 "reports": [rep.to_dict() for rep in reports]})
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_sgd(ctx: Context) -> int:
    cfg = ctx.cfg
    problem = build_problem(cfg)
    theta0 = theta_of(cfg, problem, "run.theta0")
    sampler = sampler_config(cfg, problem.space, ctx.seed)
    try:
        record = sgd_run(problem, theta0, schedule_of(cfg), sampler, int(cfg.get("run.K")),
                         sampler.seed, scale=float(cfg.get("run.scale", 1.0)),
                         epsilon=cfg.get("run.epsilon"), period=cfg.get("run.period"),
                         warm_start=bool(cfg.get("run.warm_start", False)))
    except DivergenceError as exc:
        if exc.record is not None:
            exc.record.write_csv(ctx.out / "trace.csv")
        raise
    record.write_csv(ctx.out / "trace.csv")
    record.write_periods_csv(ctx.out / "periods.csv")
    ctx.summary(record.summary())
    return EXIT_OK


def cmd_escape(ctx: Context) -> int:
    cfg = ctx.cfg
    eps = float(cfg.get("escape.epsilon"))
    if cfg.get("problem.kind") == "saddle":
        probe = find_saddle(saddle_template(cfg), eps, int(cfg.get("escape.search_seed", 0)))
        problem, theta = probe.problem, probe.theta_saddle
        certificate = probe.certificate
    else:
        problem = build_problem(cfg)
        theta = theta_of(cfg, problem)
        certificate = None
    require_saddle_regime(problem, theta, eps)
    audit = assumption_audit(problem, _audit_thetas(cfg, problem, theta))
    pi = exact_pi(problem, theta)
    gamma = spectral_gap(build_mh_kernel(problem, theta, problem.proposal()), pi).gamma
    initial = initial_distribution(cfg, problem.space)
    chi = chi_squared_divergence(initial or Distribution.uniform(problem.space), pi)
    params = derive_table1(eps, float(cfg.get("escape.delta")), audit, gamma, chi,
                           exact_objective(problem, theta), float(cfg.get("escape.L_star")),
                           override=cfg.get("override"))
    first = ctx.seed if ctx.seed is not None else int(cfg.get("sampler.seed", 0))
    seeds = range(first, first + int(cfg.get("escape.num_seeds", 50)))
    result = escape_experiment(problem, theta, params, seeds,
                               scale=float(cfg.get("escape.scale", 1.0)), initial=initial)
    write_csv(ctx.out / "escape.csv", ["seed", "decrease", "success"],
              [(s, d, d >= result.L_thres) for s, d in zip(result.seeds, result.decreases)])
    ok = result.success_fraction >= 0.8 and not result.control_success
    ctx.summary({"pass": ok, "theta_saddle": theta.tolist(), "certificate": certificate,
                 "audit": {k: v for k, v in audit.to_dict().items() if k != "per_theta"},
                 **result.to_dict()})
    return EXIT_OK if ok else EXIT_CHECK_FAILED


HANDLERS = {
    "audit": cmd_audit,
    "bounds": cmd_bounds,
    "concentration": cmd_concentration,
    "sgd": cmd_sgd,
    "escape": cmd_escape,
    "spectral": cmd_spectral,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcmcsgd", description="SGD with Markov-chain gradient estimates on finite state spaces",
        epilog="exit status: 0 ok, 1 check failed, 2 error")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=True, type=Path, help="YAML or JSON experiment file")
        p.add_argument("--seed", type=int, default=None, help="override sampler.seed")
        p.add_argument("--out", type=Path, default=None, help="output directory")
    return parser


def _error_report(exc: BaseException) -> dict:
    doc = {"status": "error", "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        doc["key"] = exc.key
        doc["line"] = exc.line
    return doc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out
    try:
        cfg = load_config(args.config)
        out = out or Path(cfg.get("output.dir", f"out/{args.command}"))
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer", key="--seed")
        validate_for(cfg, args.command)
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](Context(args.command, cfg, args.seed, out))
    except (MCMCSGDError, ValueError) as exc:
        report = _error_report(exc)
        print(json.dumps(report), file=sys.stderr)
        if out is not None:
            try:
                out.mkdir(parents=True, exist_ok=True)
                write_json(out / "error.json", report)
            except OSError:
                pass
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
