"""Exception types shared across the package."""


class GraspShotError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(GraspShotError):
    """Inconsistent shapes, invalid hyperparameters, or bad settings."""


class StaleTraceError(GraspShotError):
    """A backward pass was attempted with a trace recorded before the
    network's parameters were last mutated."""


class PlacementError(GraspShotError):
    """Scene generation could not place all objects without overlap."""


class CorruptFileError(GraspShotError):
    """A serialized container failed its checksum or length checks."""


class DegenerateDataError(GraspShotError):
    """Training data cannot support the requested fit (e.g. one class)."""


class InsufficientRankError(GraspShotError):
    """Requested projection dimension exceeds the feasible data rank."""


class DivergenceError(GraspShotError):
    """Training produced a non-finite loss."""
