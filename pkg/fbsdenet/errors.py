"""Exception hierarchy shared by the library and the CLI."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class FbsdeError(Exception):
    exit_code = EXIT_CONFIG


class ConfigError(FbsdeError):
    pass


class ShapeError(FbsdeError, ValueError):
    pass


class DomainError(FbsdeError, ValueError):
    pass


class UnsupportedOperationError(FbsdeError):
    pass


class MissingDerivativeError(FbsdeError):
    pass


class MissingTrackError(FbsdeError, KeyError):
    pass


class EmptyTapeError(FbsdeError):
    pass


class CheckpointFormatError(FbsdeError):
    pass


class CouplingError(FbsdeError):
    pass


class LatticeTooLargeError(FbsdeError, MemoryError):
    pass


class NumericalAbort(FbsdeError, ArithmeticError):
    """Non-finite state, loss or gradient, or a diverging training run."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, path: int | None = None, step: int | None = None):
        super().__init__(message)
        self.path = path
        self.step = step
