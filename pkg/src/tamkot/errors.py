"""Exception types raised across the package."""


class TamkotError(Exception):
    """Base class for all package errors."""


class DimensionError(TamkotError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(TamkotError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ContractError(TamkotError, RuntimeError):
    """An API precondition was violated (e.g. backward called twice)."""


class ParseError(TamkotError, ValueError):
    """An input file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(TamkotError, ValueError):
    """Input data violates a structural invariant."""


class UndefinedMetricError(TamkotError, ValueError):
    """A metric is undefined for the given input (e.g. AUC with one class)."""


class DegenerateTestError(TamkotError, ValueError):
    """A statistical test has no information (e.g. zero variance)."""


class TrainingDivergedError(TamkotError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch}: loss={loss!r}")


class ConfigError(TamkotError, ValueError):
    """A run configuration is invalid."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))
