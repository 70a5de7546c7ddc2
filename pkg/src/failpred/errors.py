"""Exception hierarchy.

Every exception carries a short machine-readable ``code`` that the CLI prints
on its single-line error output.
"""

from __future__ import annotations


class FailpredError(Exception):
    code = "E_FAILPRED"


class DimensionError(FailpredError, ValueError):
    code = "E_DIMENSION"


class NumericError(FailpredError, ArithmeticError):
    code = "E_NUMERIC"


class LabelError(FailpredError, IndexError):
    code = "E_LABEL"


class FormatError(FailpredError, ValueError):
    code = "E_FORMAT"


class LengthError(FormatError):
    """Payload shorter or longer than its header announces."""

    code = "E_LENGTH"


class ConfigError(FailpredError, ValueError):
    code = "E_CONFIG"


class TrainingError(FailpredError, RuntimeError):
    code = "E_DIVERGED"


class UndefinedMetricError(FailpredError, ValueError):
    code = "E_UNDEFINED_METRIC"


class FitError(FailpredError, ValueError):
    code = "E_FIT"


class GuaranteeViolation(FailpredError, AssertionError):
    code = "E_GUARANTEE"


class DependencyError(FailpredError, FileNotFoundError):
    code = "E_DEPENDENCY"


class PhaseError(FailpredError, RuntimeError):
    code = "E_PHASE"
