"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when a scenario or experiment configuration is infeasible."""


class DegenerateGeometryError(ValueError):
    """Raised when a point lies on a polygon vertex or edge, where the
    winding-number accumulation is numerically undefined."""


class NoFrameDetected(RuntimeError):
    """Raised when the synchronization metric never exceeds the detection floor."""


class EstimationFailure(RuntimeError):
    """Raised when an estimator cannot produce a value (e.g. zero correlation peak)."""


class TrainingDiverged(RuntimeError):
    """Raised when a training loss becomes NaN."""
