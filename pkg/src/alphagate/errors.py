"""Exception hierarchy for the validation pipeline.

Every artifact-level failure raises a subclass of AlphaGateError so the CLI
can map library errors to a single operational exit code.
"""


class AlphaGateError(Exception):
    """Base class for all library errors."""


class DataError(AlphaGateError):
    """Malformed, inconsistent, or out-of-span market data."""


class ConfigError(AlphaGateError):
    """Invalid or inconsistent configuration."""


class SimulationError(AlphaGateError):
    """A session could not be run to completion."""


class UndefinedMetricError(AlphaGateError):
    """A metric has no defined value on the given inputs (e.g. zero variance)."""

    def __init__(self, metric: str, reason: str = ""):
        self.metric = metric
        self.reason = reason
        msg = f"{metric} undefined" + (f": {reason}" if reason else "")
        super().__init__(msg)


class BudgetExceededError(AlphaGateError):
    """Parameter-space enumeration would exceed the configured budget."""


class LockError(AlphaGateError):
    """A locked artifact was missing, tampered with, or hash-mismatched."""
