"""Exception hierarchy.

Errors split into three families so the CLI can map them onto exit codes:
usage/config problems, data/validation problems and numerical failures.
"""


class MGFusionError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MGFusionError, ValueError):
    """Bad configuration value or unknown configuration key."""


class DataError(MGFusionError, ValueError):
    """Malformed or inconsistent input data."""


class DimensionError(DataError):
    pass


class ParameterError(DataError):
    pass


class EmptySequenceError(DataError):
    pass


class LabelError(DataError):
    pass


class ContractError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(DataError):
    pass


class CodecError(DataError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class MetricError(DataError):
    pass


class LoadError(DataError):
    """Checkpoint does not match the model it is loaded into."""


class NumericalError(MGFusionError, ArithmeticError):
    """NaN/Inf loss or another numerical breakdown during training."""


class DegenerateWeightsError(NumericalError):
    """Layer-mixing weights sum to (nearly) zero."""
