class ClothError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(ClothError, ValueError):
    pass


class DomainError(ClothError, ValueError):
    pass


class ParameterError(ClothError, ValueError):
    pass


class ScaleError(ClothError, ValueError):
    pass


class ContractError(ClothError, RuntimeError):
    pass


class NumericError(ClothError, FloatingPointError):
    pass


class TrainingError(ClothError, RuntimeError):
    """Raised when a loss or gradient goes non-finite during training."""

    def __init__(self, message, iteration=None, checkpoint=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint


class DataError(ClothError, ValueError):
    pass


class FormatError(ClothError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ClothError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
