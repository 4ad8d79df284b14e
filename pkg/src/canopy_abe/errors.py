"""Exception hierarchy shared by all toolkit modules."""


class CanopyError(Exception):
    """Base class for every error raised by the toolkit."""


class ValidationError(CanopyError, ValueError):
    """Input violates a documented invariant (CLI exit code 2)."""


class ParseError(ValidationError):
    """Malformed input file; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LasFormatError(ValidationError):
    pass


class TruncatedFileError(LasFormatError):
    pass


class DomainError(ValidationError):
    """Value outside the domain of a model (log of nonpositive, missing metric)."""


class SingularDesignError(CanopyError):
    pass


class ConvergenceError(CanopyError):
    def __init__(self, message: str, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)


class GeometryError(ValidationError):
    pass


class UnsupportedAdjustmentError(ValidationError):
    pass
