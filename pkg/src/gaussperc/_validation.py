"""Exceptions and argument checks shared across the package."""
import numbers

import numpy as np


class GaussPercError(Exception):
    """Base class for errors raised by gaussperc."""


class DomainError(GaussPercError, ValueError):
    """An argument lies outside the domain where the operation is defined."""


class NumericError(GaussPercError, ArithmeticError):
    """A numerical procedure failed to reach its tolerance."""


class ResourceError(GaussPercError, MemoryError):
    """A request exceeds the configured memory or grid budget."""


class ConfigError(GaussPercError, ValueError):
    """An experiment configuration is malformed."""


def check_in_open_interval(name, value, lo, hi):
    if not isinstance(value, numbers.Real) or not lo < value < hi:
        raise DomainError(f"{name} must lie in ({lo}, {hi}), got {value!r}")
    return float(value)


def check_positive(name, value, strict=True):
    ok = value > 0 if strict else value >= 0
    if not ok:
        raise DomainError(f"{name} must be {'>' if strict else '>='} 0, got {value!r}")
    return value


def check_finite_array(name, arr):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr
