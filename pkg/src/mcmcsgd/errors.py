"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class MCMCSGDError(Exception):
    """Base class for every error raised by this package."""


class InvalidProblemError(MCMCSGDError):
    pass


class InvalidKernelError(MCMCSGDError):
    pass


class ProposalSupportError(InvalidKernelError):
    """Proposal has q(y|x) > 0 but q(x|y) = 0 for some pair."""


class StationarityError(MCMCSGDError):
    pass


class DegenerateGapError(MCMCSGDError):
    pass


class InfiniteDivergenceError(MCMCSGDError):
    pass


class CapabilityError(MCMCSGDError):
    """The problem lacks an optional oracle (e.g. the Hessian of phi)."""


class OracleInconsistencyError(MCMCSGDError):
    pass


class PreconditionError(MCMCSGDError):
    pass


class RegimeError(PreconditionError):
    def __init__(self, message: str, regime: str):
        super().__init__(message)
        self.regime = regime


class DerivationError(MCMCSGDError):
    pass


class SearchFailure(MCMCSGDError):
    pass


class DivergenceError(MCMCSGDError):
    """Iterates left the admissible region; ``record`` holds the partial run."""

    def __init__(self, message: str, record=None):
        super().__init__(message)
        self.record = record


class ConfigError(MCMCSGDError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where += f" [key: {key}"
            where += f", line {line}]" if line is not None else "]"
        super().__init__(message + where)
        self.key = key
        self.line = line
