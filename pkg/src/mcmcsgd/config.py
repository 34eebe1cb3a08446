"""Experiment configuration files.

A config is a YAML (or JSON) mapping with the sections below. Unknown keys
are rejected with their line number, and values are validated before any
computation starts.

.. code-block:: yaml

    problem:  {kind: ising, sites: 3, J: 1.0, h: 1.0}
    theta:    [0.1, -0.2, 0.3, 0.0, 0.1]
    sampler:  {n: 64, n0: 0, initial: uniform, seed: 7}
    schedule: {kind: decaying, c: 0.01, n: 64}
    run:      {K: 2000, scale: 1.0}
    output:   {dir: out/sgd}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .chain_core import Distribution, FiniteKernel, StateSpace
from .errors import ConfigError
from .estimators import ProblemDefinition
from .optimizer import SCHEDULE_KINDS, Schedule
from .problems import (
    DiscreteViSpec,
    EntropyBanditSpec,
    IsingVmcSpec,
    SaddleTemplate,
    TabularProblem,
    build_discrete_vi,
    build_entropy_bandit,
    build_ising,
    ring_template,
)
from .sampling import SamplerConfig

PROBLEM_KEYS = {
    "ising": {"sites", "J", "h", "periodic", "features"},
    "bandit": {"rewards", "beta_reg"},
    "vi": {"target", "orientation"},
    "saddle": {"states", "amplitude", "feature_scale", "harmonic"},
    "tabular": {"features", "offset", "log_pi_coef"},
}

SCHEMA = {
    "problem": {"kind"} | set().union(*PROBLEM_KEYS.values()),
    "kernel": {"rows"},
    "theta": None,
    "sampler": {"n", "n0", "initial", "seed"},
    "schedule": {"kind", "alpha", "c", "n", "beta", "T"},
    "run": {"K", "theta0", "scale", "epsilon", "warm_start", "period"},
    "check": {"kind", "R", "h", "s_grid", "n_grid", "n0_grid", "settings", "scale", "n", "n0"},
    "audit": {"thetas", "count", "radius", "seed"},
    "escape": {"epsilon", "delta", "L_star", "num_seeds", "scale", "search_seed"},
    "override": {"beta", "alpha", "T", "K"},
    "output": {"dir"},
}

CHECK_KINDS = ("tail", "bias_variance", "second_moment", "cnc")


def _key_lines(node, prefix: str, lines: dict) -> None:
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
            lines[path] = key_node.start_mark.line + 1
            _key_lines(value_node, path, lines)


@dataclass
class ExperimentConfig:
    data: dict
    lines: dict = field(default_factory=dict)
    source: str = ""

    def section(self, name: str) -> dict:
        return self.data.get(name) or {}

    def has(self, name: str) -> bool:
        return name in self.data

    def fail(self, message: str, key: str):
        raise ConfigError(message, key=key, line=self.lines.get(key))

    def get(self, path: str, default=None, required: bool = False):
        cur = self.data
        for part in path.split("."):
            if not isinstance(cur, dict) or part not in cur:
                if required:
                    self.fail(f"missing required key {path!r}", path)
                return default
            cur = cur[part]
        return cur

    def resolved(self) -> dict:
        return self.data


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"cannot parse {source}: {exc}",
                          line=None if mark is None else mark.line + 1) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    lines: dict = {}
    _key_lines(node, "", lines)
    cfg = ExperimentConfig(data=data, lines=lines, source=source)
    for name, value in data.items():
        if name not in SCHEMA:
            cfg.fail(f"unknown top-level key {name!r}", str(name))
        allowed = SCHEMA[name]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            cfg.fail(f"section {name!r} must be a mapping", str(name))
        for key in value:
            if key not in allowed:
                cfg.fail(f"unknown key {key!r} in section {name!r}", f"{name}.{key}")
    if "problem" in data:
        kind = cfg.get("problem.kind", required=True)
        if kind not in PROBLEM_KEYS:
            cfg.fail(f"problem.kind must be one of {sorted(PROBLEM_KEYS)}", "problem.kind")
        for key in data["problem"]:
            if key != "kind" and key not in PROBLEM_KEYS[kind]:
                cfg.fail(f"key {key!r} does not apply to problem kind {kind!r}", f"problem.{key}")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, str(path))


# ---------------------------------------------------------------------------
# typed accessors


def _positive_int(cfg: ExperimentConfig, path: str, value, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        cfg.fail(f"{path} must be an integer, got {value!r}", path)
    if value < minimum:
        cfg.fail(f"{path} must be >= {minimum}, got {value!r}", path)
    return int(value)


def _number(cfg: ExperimentConfig, path: str, value, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        cfg.fail(f"{path} must be a number, got {value!r}", path)
    if positive and not value > 0:
        cfg.fail(f"{path} must be positive, got {value!r}", path)
    return float(value)


def _vector(cfg: ExperimentConfig, path: str, value, size: int | None = None) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        cfg.fail(f"{path} must be a list of numbers", path)
    if arr.ndim != 1 or (size is not None and arr.size != size):
        want = f" of length {size}" if size is not None else ""
        cfg.fail(f"{path} must be a flat list{want}", path)
    return arr


def build_problem(cfg: ExperimentConfig) -> ProblemDefinition:
    p = cfg.get("problem", required=True)
    kind = p["kind"]
    try:
        if kind == "ising":
            spec = IsingVmcSpec(sites=_positive_int(cfg, "problem.sites", p.get("sites", 4), 2),
                                J=float(p.get("J", 1.0)), h=float(p.get("h", 1.0)),
                                periodic=bool(p.get("periodic", False)),
                                features=p.get("features", "nn"))
            return build_ising(spec)
        if kind == "bandit":
            rewards = _vector(cfg, "problem.rewards", cfg.get("problem.rewards", required=True))
            beta = _number(cfg, "problem.beta_reg", p.get("beta_reg", 1.0), positive=True)
            return build_entropy_bandit(EntropyBanditSpec(tuple(rewards), beta))
        if kind == "vi":
            target = _vector(cfg, "problem.target", cfg.get("problem.target", required=True))
            return build_discrete_vi(DiscreteViSpec(tuple(target),
                                                    orientation=p.get("orientation", "reverse_kl")))
        if kind == "saddle":
            return saddle_template(cfg).build()
        features = np.asarray(cfg.get("problem.features", required=True), dtype=float)
        offset = _vector(cfg, "problem.offset", cfg.get("problem.offset", required=True))
        return TabularProblem(features, offset, log_pi_coef=float(p.get("log_pi_coef", 0.0)))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        cfg.fail(f"invalid problem block: {exc}", "problem")


def saddle_template(cfg: ExperimentConfig) -> SaddleTemplate:
    p = cfg.section("problem")
    return ring_template(states=int(p.get("states", 6)), amplitude=float(p.get("amplitude", 1.0)),
                         feature_scale=float(p.get("feature_scale", 2.0)),
                         harmonic=int(p.get("harmonic", 2)))


def theta_of(cfg: ExperimentConfig, problem: ProblemDefinition, path: str = "theta") -> np.ndarray:
    value = cfg.get(path)
    if value is None:
        return np.zeros(problem.dim)
    return _vector(cfg, path, value, problem.dim)


def initial_distribution(cfg: ExperimentConfig, space: StateSpace) -> Distribution | None:
    value = cfg.get("sampler.initial")
    path = "sampler.initial"
    if value is None or value == "uniform":
        return None
    if isinstance(value, str) and value.startswith("point_mass:"):
        idx = _positive_int(cfg, path, int(value.split(":", 1)[1]), 0)
        if idx >= space.size:
            cfg.fail(f"point mass index {idx} outside the state space", path)
        return Distribution.point_mass(space, idx)
    weights = _vector(cfg, path, value, space.size)
    try:
        return Distribution(space, weights)
    except ValueError as exc:
        cfg.fail(str(exc), path)


def sampler_config(cfg: ExperimentConfig, space: StateSpace, seed: int | None = None
                   ) -> SamplerConfig:
    s = cfg.section("sampler")
    n = _positive_int(cfg, "sampler.n", cfg.get("sampler.n", required=True))
    n0 = _positive_int(cfg, "sampler.n0", s.get("n0", 0), 0)
    seed = seed if seed is not None else _positive_int(cfg, "sampler.seed", s.get("seed", 0), 0)
    return SamplerConfig(n=n, n0=n0, initial=initial_distribution(cfg, space), seed=seed)


def schedule_of(cfg: ExperimentConfig) -> Schedule:
    s = cfg.get("schedule", required=True)
    kind = s.get("kind")
    if kind not in SCHEDULE_KINDS:
        cfg.fail(f"schedule.kind must be one of {SCHEDULE_KINDS}", "schedule.kind")
    try:
        return Schedule(kind=kind, alpha=float(s.get("alpha", 0.0)), c=float(s.get("c", 0.0)),
                        n=int(s.get("n", cfg.get("sampler.n", 1))), beta=float(s.get("beta", 0.0)),
                        T=int(s.get("T", 1)))
    except ValueError as exc:
        cfg.fail(str(exc), "schedule")


def kernel_of(cfg: ExperimentConfig) -> FiniteKernel:
    rows = cfg.get("kernel.rows", required=True)
    try:
        return FiniteKernel.from_matrix(rows)
    except (ValueError, TypeError) as exc:
        cfg.fail(f"invalid kernel: {exc}", "kernel.rows")


def validate_for(cfg: ExperimentConfig, command: str) -> None:
    """Command-specific required keys and ranges, checked before any computation."""
    if command in ("audit", "bounds", "sgd", "escape"):
        cfg.get("problem", required=True)
    if command == "sgd":
        cfg.get("sampler.n", required=True)
        schedule_of(cfg)
        _positive_int(cfg, "run.K", cfg.get("run.K", required=True))
    if command == "bounds":
        cfg.get("sampler.n", required=True)
        _positive_int(cfg, "check.R", cfg.get("check.R", required=True), 100)
    if command == "concentration":
        kind = cfg.get("check.kind", required=True)
        if kind not in CHECK_KINDS:
            cfg.fail(f"check.kind must be one of {CHECK_KINDS}", "check.kind")
        _positive_int(cfg, "check.R", cfg.get("check.R", required=True), 2)
        if kind == "cnc":
            cfg.get("problem", required=True)
        elif not cfg.has("kernel"):
            cfg.fail("kernel block is required for this check", "kernel")
    if command == "escape":
        for key in ("escape.epsilon", "escape.delta", "escape.L_star"):
            cfg.get(key, required=True)
        _positive_int(cfg, "escape.num_seeds", cfg.get("escape.num_seeds", 50))
    if command == "spectral" and not (cfg.has("kernel") or cfg.has("problem")):
        cfg.fail("spectral needs a kernel or a problem block", "kernel")
