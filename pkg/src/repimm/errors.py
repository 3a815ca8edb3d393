"""Exception types raised across the package."""

from __future__ import annotations


class ModelError(Exception):
    """Base class for numeric / model-level failures (CLI exit code 2)."""


class AssumptionViolation(ModelError):
    pass


class GridTooCoarse(ModelError):
    pass


class DomainMismatch(ModelError):
    pass


class NegativeDensity(ModelError):
    pass


class StepTooLarge(ModelError):
    pass


class NoContraction(ModelError):
    pass


class NonConvergence(ModelError):
    pass


class BoundViolation(ModelError):
    pass


class OrderViolation(ModelError):
    pass


class InfiniteTheta(ModelError):
    pass


class AlphaOne(ModelError):
    pass


class NotUnstableRegime(ModelError):
    pass


class TimeOutOfRange(ModelError):
    pass


class TooFewReplicas(ModelError):
    pass


class WindowTooLarge(ModelError):
    pass


class EpsilonOutOfRange(ModelError):
    pass


class NoPairs(ModelError):
    pass


class TooFewSnapshots(ModelError):
    pass


class ReplayMismatch(ModelError):
    pass


class ConfigError(Exception):
    """Base class for configuration problems (CLI exit code 1)."""


class ParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.key = key


class UnknownKey(ParseError):
    """A key the schema does not know (raised in strict mode)."""


class RangeError(ParseError):
    """A value outside a module precondition."""
