"""Exceptions shared across modules, each mapped to a CLI exit code."""


class ConfigError(ValueError):
    """Bad configuration: unknown key, malformed value, mode mismatch. Exit code 2."""


class DataError(ValueError):
    """Bad input data: malformed file, non-finite values, empty class. Exit code 3."""


class DivergenceError(RuntimeError):
    """Training or sampling blew up. Exit code 4.

    Carries where it happened: `step` is the SGLD chain step for sampler
    failures, `iteration` the training iteration for trainer failures,
    `value` the offending energy or gap.
    """

    def __init__(self, message, step=None, iteration=None, value=None):
        super().__init__(message)
        self.step = step
        self.iteration = iteration
        self.value = value


class InvariantError(RuntimeError):
    """Internal contract violated (e.g. a mistagged batch). Exit code 5."""
