"""Exception types shared across the package."""


class ModelError(ValueError):
    """Base class for invalid network descriptions.

    ``key`` names the config entry (or argument) that triggered the error.
    """

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class ConfigError(ModelError):
    """Malformed or missing entry in a config document."""


class DimensionError(ModelError):
    """Matrix shapes that do not fit together."""


class StructureError(ModelError):
    """Graph data violating the 0/1, zero-diagonal adjacency rules."""


class GeneratorError(ModelError):
    """Transition-rate matrix with negative rates or non-zero row sums."""


class MissingGainError(ModelError):
    """An operation needs the consensus gain K but the model has none."""
