"""Exception hierarchy shared by every fedef module."""


class FedEFError(Exception):
    """Base class for all library errors."""


class StructuralError(FedEFError, ValueError):
    """Layouts disagree or an encoding is malformed."""


class NumericInputError(FedEFError, ValueError):
    """Input vector contains NaN or Inf."""


class UndefinedRatioError(FedEFError, ZeroDivisionError):
    """A normalised ratio was requested for a zero-norm reference."""


class ConfigurationError(FedEFError, ValueError):
    """Invalid run / problem configuration."""


class DivergenceError(FedEFError, FloatingPointError):
    """Training produced a non-finite value."""

    def __init__(self, message: str, round: int | None = None, client: int | None = None):
        ctx = []
        if round is not None:
            ctx.append(f"round={round}")
        if client is not None:
            ctx.append(f"client={client}")
        if ctx:
            message = f"{message} ({', '.join(ctx)})"
        super().__init__(message)
        self.round = round
        self.client = client


class InvariantViolation(FedEFError, AssertionError):
    """A runtime identity the algorithm guarantees did not hold."""
