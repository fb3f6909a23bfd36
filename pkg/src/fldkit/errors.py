"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: config/usage problems (ConfigError,
ParameterError, DimensionError) exit 2, data/format problems (DataError,
FormatError) exit 3, numerical failures exit 4.
"""
from __future__ import annotations


class FldkitError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(FldkitError):
    """Shape or dimensionality contract violation."""


class ParameterError(FldkitError):
    """Invalid argument value (rates, strides, alphas, ...)."""


class ConfigError(FldkitError):
    """Inconsistent or unusable run configuration."""


class DataError(FldkitError):
    """Input data violates a precondition (missing column, bad label, ...)."""


class FormatError(FldkitError):
    """On-disk artifact violates its format (magic, header, truncation)."""


class DegenerateDataError(DataError):
    """Statistic undefined for this data (zero variance, tiny group)."""


class UndefinedMetricError(DataError):
    """Metric undefined for this input (single-class AUC, ...)."""


class NumericalError(FldkitError):
    """Non-finite values where finite ones are required."""
