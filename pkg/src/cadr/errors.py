"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError (and subclasses) -> 2,
DivergenceError -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration value, key, or file."""


class InsufficientSamplesError(ConfigError):
    """A masking or subsampling request needs more samples than the dataset has."""


class DataFormatError(ConfigError):
    """A binary dataset or checkpoint file is malformed."""


class DivergenceError(RuntimeError):
    """Model parameters became non-finite during training."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
