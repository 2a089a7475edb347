"""Exception hierarchy. Each CLI exit code maps to one branch."""


class OrthospotError(Exception):
    exit_code = 1


class ConfigError(OrthospotError):
    exit_code = 2

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DatasetError(OrthospotError):
    exit_code = 3


class NoEligibleSample(DatasetError):
    """The anchor has no candidate for at least one scenario; pick another anchor."""


class CheckpointError(OrthospotError):
    exit_code = 4


class NumericError(OrthospotError):
    exit_code = 5


class ShapeError(OrthospotError, ValueError):
    pass
