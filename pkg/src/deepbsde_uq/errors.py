"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid hyperparameters, shapes or sizes."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class StaleCacheError(RuntimeError):
    """backward() called without a matching train-mode forward()."""


class TrainingDivergedError(FloatingPointError):
    """A loss or gradient became non-finite."""


class SimulationDivergedError(FloatingPointError):
    def __init__(self, sample: int, step: int):
        super().__init__(f"non-finite state at sample {sample}, step {step}")
        self.sample = sample
        self.step = step


class UndefinedCorrelationError(ValueError):
    """Correlation requested on constant input."""
