"""Exception hierarchy shared by every module in the package."""

from __future__ import annotations


class CafeError(Exception):
    """Base class for all package errors."""


class InputError(CafeError, ValueError):
    """Rejected input: shape mismatch, out-of-range value, bad label."""


class NumericError(CafeError, ArithmeticError):
    """A non-finite value appeared during computation."""

    def __init__(self, message: str, layer: int | None = None, client_id: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.client_id = client_id


class ConvergenceError(CafeError, RuntimeError):
    """Iterative solver hit its iteration cap.

    Carries the best estimate reached so callers can decide whether it is
    usable anyway.
    """

    def __init__(self, message: str, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class CapabilityError(CafeError):
    """Request exceeds a deliberate size cap (e.g. dense oracle matrices)."""


class MetricUndefinedError(CafeError, ValueError):
    """A metric is undefined for the given records (empty group, zero baseline)."""


class ConfigError(CafeError, ValueError):
    """Invalid experiment configuration; ``problems`` lists every violation."""

    def __init__(self, problems: list[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
