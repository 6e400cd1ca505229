"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class FormatError(ValueError):
    """A file on disk is not in the expected format."""


class DegenerateVectorError(ValueError):
    """A vector has (numerically) zero norm."""


class ConstantObservationError(ValueError):
    """An observation vector has zero variance, so correlation is undefined."""


class TooFewClientsError(ValueError):
    """Not enough clients remain for a density estimate."""


class AggregationError(RuntimeError):
    """No client was left to aggregate."""


class ConfigError(ValueError):
    """An experiment configuration is invalid."""
