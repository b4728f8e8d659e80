"""Exception types shared across the package."""


class WaypointOptError(Exception):
    """Base class for all package errors."""


class InvalidInputError(WaypointOptError):
    """Non-finite or out-of-contract value passed to a numeric routine."""


class DegenerateMissionError(WaypointOptError):
    """Mission geometry collapses (coincident consecutive points)."""


class SolverFailureError(WaypointOptError):
    """Hard numerical failure inside an optimization (NaN in line search)."""


class SamplingError(WaypointOptError):
    """Task sampling cannot satisfy its constraints."""


class DatasetFormatError(WaypointOptError):
    """Dataset file is malformed, truncated, or refused."""


class ModelFormatError(WaypointOptError):
    """Model file is malformed or inconsistent with its header."""


class TrainingError(WaypointOptError):
    """Training diverged (non-finite loss)."""


class PlanningError(WaypointOptError):
    """Transition/polynomial planning is infeasible or degenerate."""


class PredictionTimeoutError(WaypointOptError):
    """Policy rollout never reached its exit threshold."""


class ConfigError(WaypointOptError):
    """Configuration is malformed or contains unknown keys."""
