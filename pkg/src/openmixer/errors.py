"""Exception types shared across the package."""


class OpenMixerError(Exception):
    pass


class ConfigError(OpenMixerError, ValueError):
    """Invalid or inconsistent configuration."""


class InputError(OpenMixerError, ValueError):
    """Malformed or out-of-contract input data."""


class ValidationError(InputError):
    """A file or dataset failed a consistency check.

    ``problems`` lists every offending item so callers can report all of them at once.
    """

    def __init__(self, message, problems=None):
        self.problems = list(problems or [])
        if self.problems:
            message = f"{message}: " + "; ".join(str(p) for p in self.problems)
        super().__init__(message)
