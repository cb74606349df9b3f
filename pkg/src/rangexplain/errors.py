"""Exception types raised across the package."""


class RangeExplainError(Exception):
    """Base class for all package errors."""


class InputShapeError(RangeExplainError, ValueError):
    pass


class ModelFormatError(RangeExplainError, ValueError):
    """A serialized model, bank or heads file could not be parsed."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class ValidationError(RangeExplainError, ValueError):
    pass


class DivergenceError(RangeExplainError, ArithmeticError):
    def __init__(self, epoch, what="training"):
        self.epoch = epoch
        super().__init__(f"{what} diverged (non-finite loss) at epoch {epoch}")


class DegenerateRangeError(RangeExplainError, ValueError):
    pass


class MalformedVectorError(RangeExplainError, ValueError):
    pass


class NoCandidateError(RangeExplainError, LookupError):
    """No dataset sample has a prediction inside the requested window."""

    def __init__(self, reference, delta, nearest):
        self.reference = reference
        self.delta = delta
        self.nearest = nearest
        super().__init__(
            f"no sample with prediction in [{reference - delta:.6g}, {reference + delta:.6g}]; "
            f"nearest achievable prediction is {nearest:.6g}"
        )


class ConfigurationError(RangeExplainError, ValueError):
    pass


class SizeError(RangeExplainError, ValueError):
    pass


class QuerySpecError(RangeExplainError, ValueError):
    pass
