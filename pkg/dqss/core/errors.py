from typing import Any, Dict, Optional


class DqssError(Exception):
    """Base error; every subclass maps to one process exit code."""

    exit_code: int = 1

    def __init__(self, detail: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(detail)
        self.detail = detail
        self.context = context or {}

    def __str__(self) -> str:
        return self.detail


# configuration
class ConfigError(DqssError):
    exit_code = 3


class CalibrationConfigError(ConfigError):
    pass


# validation
class ValidationFailure(DqssError):
    exit_code = 4


class DimensionError(ValidationFailure):
    pass


class ShapeMismatchError(DimensionError):
    pass


class UnknownLayerKindError(ValidationFailure):
    pass


class ManifestVersionError(ValidationFailure):
    pass


class ManifestValidationError(ValidationFailure):
    pass


class UnknownStrategyError(ValidationFailure):
    pass


class DuplicateKeyError(ValidationFailure):
    pass


class QuantRangeError(ValidationFailure):
    pass


class MissingQParamsError(ValidationFailure):
    pass


class AssignmentError(ValidationFailure):
    pass


class StaleGraphError(ValidationFailure):
    pass


# data and I/O
class DataError(DqssError):
    exit_code = 5


class MissingBlobError(DataError):
    pass


class BlobLengthError(DataError):
    pass


class MalformedIndexError(DataError):
    pass


# numerics
class NumericalError(DqssError):
    exit_code = 6


class NonFiniteInputError(NumericalError):
    pass


class NonFiniteLossError(NumericalError):
    pass


class DegenerateCalibrationError(NumericalError):
    pass


class TrainingDivergedError(DqssError):
    exit_code = 7
