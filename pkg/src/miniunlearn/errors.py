"""Exception hierarchy.

Every error carries a stable ``code`` string and the process ``exit_code`` the
CLI uses when the error escapes a command.
"""


class UnlearnError(Exception):
    code = "error"
    exit_code = 1


class UsageError(UnlearnError):
    code = "usage"
    exit_code = 2


class ConfigError(UnlearnError, ValueError):
    code = "config"
    exit_code = 2


class ContractError(UnlearnError, ValueError):
    """Inputs violate a shape or dimension contract."""

    code = "contract_violation"
    exit_code = 3


class DataError(UnlearnError, ValueError):
    code = "data"
    exit_code = 3


class ParseError(DataError):
    code = "parse"


class NotFoundError(DataError, IndexError):
    code = "not_found"


class EmptyBatchError(DataError):
    code = "empty_batch"


class FingerprintMismatch(DataError):
    code = "fingerprint_mismatch"


class UnsupportedMetric(DataError):
    code = "unsupported_metric"


class NumericError(UnlearnError, ArithmeticError):
    code = "numeric"
    exit_code = 4


class NumericFailure(NumericError):
    """Training diverged (non-finite parameters)."""

    code = "numeric_failure"


class DegenerateBatchError(NumericError):
    """Every member of a batch is being unlearned, so B - dB = 0."""

    code = "degenerate_batch"


class StrongConvexityUnavailable(NumericError):
    code = "strong_convexity_unavailable"


class ContractionViolated(NumericError):
    code = "contraction_violated"


class ConvexityError(NumericError):
    """A secant pair has non-positive curvature."""

    code = "convexity"


class FactorizationError(NumericError):
    code = "factorization"


class CapacityError(UnlearnError):
    code = "capacity"
    exit_code = 5
