"""Exception types shared across the package."""


class MineError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MineError):
    """Non-finite or otherwise malformed numeric input."""


class NumericDomainError(MineError):
    """A quantity left its mathematical domain (overflow, log of <= 0, ...)."""


class ConfigError(MineError):
    """Bad or missing configuration value."""


class ShapeError(MineError):
    """Array shapes incompatible with the requested operation."""


class CapacityError(MineError):
    """Problem size exceeds a hard implementation limit."""


class IntegrationDivergedError(MineError):
    """Integrator produced a non-finite state.

    Attributes:
        step: index of the step (1-based) whose update went non-finite.
    """

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"integration diverged at step {step}")


class BoundViolationError(MineError):
    """A certified inequality came out negative beyond tolerance."""


class TheoremCheckError(MineError):
    """A finite-sample theorem assertion failed."""


class DataQualityError(MineError):
    """Too many skipped/failed records during dataset generation."""


class ProvenanceError(MineError):
    """Artifact hash does not match the file it claims to derive from."""


class TrainingDivergedError(MineError):
    """Loss became non-finite during training.

    Attributes:
        iteration: training step at which the loss went non-finite.
    """

    def __init__(self, iteration: int, message: str | None = None):
        self.iteration = iteration
        super().__init__(message or f"training diverged at iteration {iteration}")


class StateError(MineError):
    """Operation called in an invalid order (e.g. backward before forward)."""
