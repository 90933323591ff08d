"""Exception hierarchy shared by the library and the CLI."""


class FedMCError(Exception):
    """Base class for every error raised by fedmc-admm."""

    pass


class ConfigError(FedMCError, ValueError):
    """Raised when a run configuration or an operation argument is invalid."""

    pass


class DatasetError(FedMCError):
    """Raised when a ratings file cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyDatasetError(DatasetError):
    """Raised when a ratings file holds no records."""

    pass


class DimensionError(FedMCError, ValueError):
    """Raised when factor shapes do not match the observed matrix."""

    pass


class DomainError(FedMCError, ValueError):
    """Raised when an argument lies outside an operator's domain."""

    pass


class NumericError(FedMCError, ArithmeticError):
    """Raised when an input holds NaN or infinite entries."""

    pass


class DivergenceError(FedMCError):
    """Raised when an iterate turns non-finite during a round."""

    def __init__(self, stage: str, round: int | None = None, client: int | None = None):
        self.stage = stage
        self.round = round
        self.client = client
        where = []
        if round is not None:
            where.append(f"round {round}")
        if client is not None:
            where.append(f"client {client}")
        location = f" ({', '.join(where)})" if where else ""
        super().__init__(
            f"Non-finite iterate in {stage}{location}; try a larger beta"
        )


class InvariantError(FedMCError):
    """Raised when the dual-variable identity fails after a round."""

    def __init__(self, round: int, client: int, rel_error: float):
        self.round = round
        self.client = client
        self.rel_error = rel_error
        super().__init__(
            f"Dual identity violated at round {round}, client {client}: "
            f"relative error {rel_error:.3e}"
        )


class CheckpointError(FedMCError):
    """Raised when a checkpoint file is missing keys or has a foreign version."""

    pass
