"""Exception types shared across the package."""


class StorydiffError(Exception):
    """Base class for all package errors."""


class ContractError(StorydiffError):
    """A caller violated a documented precondition."""


class ShapeError(ContractError):
    """Operand shapes are incompatible; the message names both shapes."""


class MaskError(StorydiffError):
    """An attention mask is invalid (e.g. a fully blocked row)."""


class ConfigError(StorydiffError):
    """Invalid configuration; maps to CLI exit code 2."""


class DataError(StorydiffError):
    """Malformed dataset content or out-of-vocabulary tokens."""


class StatsError(StorydiffError):
    """Invalid statistics input (too few samples, non-PSD covariance)."""


class TrainingDiverged(StorydiffError):
    """Training aborted on a non-finite loss."""
