"""Exception types shared across the package."""


class GraphBNNError(Exception):
    """Base class for all package errors."""


class NumericalError(GraphBNNError):
    """Base class for failures of a numerical procedure (CLI exit code 3)."""


class NonFiniteValue(NumericalError):
    """A value or derivative evaluated to NaN or Inf."""

    def __init__(self, message="non-finite value encountered", index=None):
        super().__init__(message)
        self.index = index


class EigenFailure(NumericalError):
    pass


class Diverged(NumericalError):
    pass


class SingularAtAxis(NumericalError):
    pass


class DimensionMismatch(GraphBNNError, ValueError):
    pass


class EmptyGraph(GraphBNNError, ValueError):
    pass


class DegenerateChannel(GraphBNNError, ValueError):
    pass


class DegenerateTessellation(GraphBNNError, RuntimeError):
    pass


class DisconnectedGraph(GraphBNNError, ValueError):
    pass


class LengthMismatch(GraphBNNError, ValueError):
    pass


class LayoutMismatch(GraphBNNError, ValueError):
    pass


class InvalidConfig(GraphBNNError, ValueError):
    """Configuration problem; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field
