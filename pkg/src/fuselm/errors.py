"""Exception hierarchy.

Every error raised by the package derives from FuseLMError so callers can
catch the library as a unit. The CLI maps these onto exit codes.
"""


class FuseLMError(Exception):
    """Base class for all package errors."""


class DimensionError(FuseLMError):
    """Shape or axis mismatch between tensors."""


class ParameterError(FuseLMError):
    """A scalar argument is outside its valid range."""


class ValidationError(FuseLMError):
    """Structured input violates an invariant."""


class VocabularyError(FuseLMError):
    """Unknown character or token id."""


class DegenerateInputError(FuseLMError):
    """Numerically degenerate input, e.g. a zero-norm embedding."""


class CapacityError(FuseLMError):
    """Sequence exceeds the configured maximum length."""


class ConfigurationError(FuseLMError):
    """Invalid or inconsistent configuration."""


class DatasetParseError(FuseLMError):
    """Malformed dataset record; carries the offending line number."""

    def __init__(self, message: str, line_number: int | None = None):
        super().__init__(message)
        self.line_number = line_number


class DivergenceError(FuseLMError):
    """Training produced a non-finite loss; names the offending component."""

    def __init__(self, message: str, component: str | None = None):
        super().__init__(message)
        self.component = component


class CheckpointError(FuseLMError):
    """Base class for checkpoint load/save failures."""


class CheckpointVersionError(CheckpointError):
    """Wrong magic bytes or unsupported format version."""


class CheckpointTruncationError(CheckpointError):
    """File ended before the declared payload."""


class CheckpointChecksumError(CheckpointError):
    """Stored digest does not match the payload."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor does not fit the target model; names the tensor."""

    def __init__(self, message: str, tensor_name: str | None = None):
        super().__init__(message)
        self.tensor_name = tensor_name
