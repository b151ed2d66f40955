"""Exception types shared across the package."""

from __future__ import annotations


class SpecbayesError(Exception):
    """Base class for package errors."""


class ConfigError(SpecbayesError):
    """Bad configuration, malformed input file, or inconsistent run setup."""


class DomainBoundsError(SpecbayesError, ValueError):
    """A query fell outside a tabulated domain.

    Carries the parameter name and the valid interval so callers can report
    which axis was violated.
    """

    def __init__(self, name: str, value: float, lo: float, hi: float):
        self.name = name
        self.value = value
        self.bounds = (lo, hi)
        super().__init__(
            f"{name}={value!r} outside tabulated range [{lo!r}, {hi!r}]"
        )


class ForwardSingularityError(SpecbayesError, ArithmeticError):
    """The coupling denominator (1 - s * reflectance) hit zero or below."""

    def __init__(self, channel: int, denom: float):
        self.channel = channel
        self.denom = denom
        super().__init__(
            f"forward model singular at channel {channel}: "
            f"1 - s*reflectance = {denom!r} <= 0"
        )


class FactorizationError(SpecbayesError, ValueError):
    """A matrix expected to be symmetric positive definite was not."""


class IllConditionedError(FactorizationError):
    """Factorization failed with a condition-number estimate attached."""

    def __init__(self, message: str, cond_estimate: float):
        self.cond_estimate = cond_estimate
        super().__init__(f"{message} (condition estimate {cond_estimate:.3e})")


class DivergedError(SpecbayesError, RuntimeError):
    """The optimizer could not find a finite cost decrease."""


class DegenerateSeriesError(SpecbayesError, ValueError):
    """A sample series had zero variance where a distributional fit needs spread."""


class FileFormatError(SpecbayesError, ValueError):
    """An on-disk artifact failed to parse or validate."""
