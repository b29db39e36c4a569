"""Exception hierarchy shared by every covtanet module."""


class CovTANetError(Exception):
    pass


class InvalidShapeError(CovTANetError, ValueError):
    pass


class ConfigError(CovTANetError, ValueError):
    pass


class DomainError(CovTANetError, ValueError):
    pass


class InvalidInputError(CovTANetError, ValueError):
    pass


class NumericError(CovTANetError, ArithmeticError):
    """Non-finite activations; ``layer`` names the module that produced them."""

    def __init__(self, layer, message="non-finite activations"):
        self.layer = layer
        super().__init__(f"{layer}: {message}")


class DivergenceError(NumericError):
    pass


class DataError(CovTANetError):
    pass


class CorruptDataError(DataError):
    pass


class MissingAnnotationError(DataError):
    pass


class ValidationError(DataError, ValueError):
    pass
