"""Exception hierarchy shared by every module in the package.

All errors raised on purpose derive from ShopMatchError so callers (and
the CLI exit-code mapping) can tell deliberate failures from bugs.
"""


class ShopMatchError(Exception):
    """Base class for every error this package raises on purpose."""


class ConfigError(ShopMatchError):
    """A configuration value is missing, out of range, or inconsistent."""


class ValidationError(ShopMatchError):
    """A runtime input (token id, weight, feature vector) is invalid."""


class ContractError(ShopMatchError):
    """An API was called out of order or with a malformed argument."""


class DimensionError(ShopMatchError):
    """Array shapes do not line up for the requested operation."""


class NumericError(ShopMatchError):
    """A computation produced NaN or Inf, or a gradient check failed hard."""


class DegenerateInputError(ShopMatchError):
    """A vector with (near-)zero norm reached a normalization step."""


class DataError(ShopMatchError):
    """Corpus or batch contents violate a structural requirement."""


class ParseError(ShopMatchError):
    """A data file exists but its contents cannot be decoded."""


class FormatError(ShopMatchError):
    """A binary artifact has a bad magic, version, or layout."""


class CheckpointError(FormatError):
    """A model checkpoint cannot be read or does not match its config."""


class TrainingError(ShopMatchError):
    """Training aborted; the message points at the diagnostic dump."""


class ServiceError(ShopMatchError):
    """HTTP-layer failure with a machine-readable code and status."""

    def __init__(self, code: str, message: str, status: int = 400):
        super().__init__(message)
        self.code = code
        self.status = status
