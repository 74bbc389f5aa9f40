"""Exception types shared across the package.

The CLI maps each class to a fixed exit code, so keep the hierarchy flat.
"""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition (shape, length, range)."""


class ConfigurationError(RuntimeError):
    """Bad or inconsistent configuration, including missing/incompatible checkpoints."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class MissingCheckpointError(ConfigurationError):
    """A checkpoint directory a stage depends on does not exist."""
