"""Exception hierarchy shared by all gridsleuth modules."""


class GridSleuthError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(GridSleuthError, ValueError):
    pass


class InfeasibleError(GridSleuthError):
    """The equality constraints of a sparse-recovery problem have no solution."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConvergenceError(GridSleuthError):
    """An iterative method stopped at its iteration cap.

    The last iterate and its residual are kept so callers can decide
    whether the partial answer is usable.
    """

    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class ModelError(GridSleuthError):
    """Feeder model is structurally inconsistent."""


class AssemblyError(ModelError):
    pass


class ParseError(GridSleuthError):
    """Text input could not be parsed; carries a 1-based line and column."""

    def __init__(self, reason, line=None, column=None, token=None):
        self.reason = reason
        self.line = line
        self.column = column
        self.token = token
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + reason)


class StreamFormatError(GridSleuthError):
    """Binary or CSV phasor stream is malformed; ``offset`` is a byte offset."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class PowerFlowError(GridSleuthError):
    def __init__(self, message, slot=None, mismatch=None):
        if slot is not None:
            message = f"slot {slot}: {message}"
        super().__init__(message)
        self.slot = slot
        self.mismatch = mismatch


class DivergenceError(PowerFlowError):
    """Voltage collapsed below the allowed floor during power flow."""


class DegenerateDataError(GridSleuthError):
    pass


class InsufficientDataError(GridSleuthError):
    pass


class IdentificationError(GridSleuthError):
    """Wraps a failure inside the identification pipeline with its stage label."""

    def __init__(self, stage, cause):
        super().__init__(f"identification failed in stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause


class LocalizationError(GridSleuthError):
    pass


class ConfigError(GridSleuthError):
    pass
