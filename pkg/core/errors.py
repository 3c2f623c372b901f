"""Exception hierarchy for the completion library."""


class MVTCError(Exception):
    """Base class for all library errors."""


class ArgumentError(MVTCError, ValueError):
    """Invalid argument: bad mode, mismatched dimensions, malformed input."""


class IngestionError(MVTCError):
    """An update event could not be ingested."""

    def __init__(self, message: str, record: int | None = None, line: int | None = None):
        self.record = record
        self.line = line
        if line is not None:
            prefix = f"line {line}: "
        elif record is not None:
            prefix = f"record {record}: "
        else:
            prefix = ""
        super().__init__(prefix + message)


class UnsupportedShapeError(MVTCError):
    """The dataset shape cannot be handled by the requested operation."""


class SolverDivergenceError(MVTCError):
    """A factor update produced a non-finite gradient."""

    def __init__(self, mode: str, iteration: int):
        self.mode = mode
        self.iteration = iteration
        super().__init__(f"non-finite gradient for factor {mode} at iteration {iteration}")


class StreamError(MVTCError):
    """The update stream violated its ordering contract."""


class SnapshotFormatError(MVTCError):
    """A binary tensor snapshot is malformed."""
