"""Exception hierarchy shared across the package."""


class HadaError(Exception):
    """Base class for all errors raised by :mod:`hada`."""


class DimensionError(HadaError, ValueError):
    pass


class DegenerateInputError(HadaError, ValueError):
    pass


class StructuralError(HadaError, ValueError):
    """A graph or segment layout violates a structural requirement."""


class ContractError(HadaError, ValueError):
    pass


class ConfigError(HadaError, ValueError):
    pass


class InputError(HadaError, ValueError):
    pass


class NumericalError(HadaError, ArithmeticError):
    """Non-finite values appeared during training."""


class StoreError(HadaError):
    pass


class BadMagicError(StoreError):
    pass


class TruncatedPayloadError(StoreError):
    pass


class UnsupportedVersionError(StoreError):
    pass


class DimMismatchError(StoreError):
    pass


class CheckpointError(HadaError):
    pass


class ConfigMismatchError(CheckpointError):
    pass
