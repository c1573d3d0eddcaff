class MixAntError(Exception):
    """Base class for every error raised by the mixant package."""


class ShapeError(MixAntError, ValueError):
    pass


class NonFiniteError(MixAntError, FloatingPointError):
    pass


class GraphError(MixAntError, RuntimeError):
    pass


class NonDeterminismError(MixAntError, RuntimeError):
    pass


class DiscretizationError(MixAntError, ValueError):
    pass


class RoutingError(MixAntError, ValueError):
    pass


class ScheduleError(MixAntError, ValueError):
    pass


class GrammarError(MixAntError, ValueError):
    pass


class EvaluationError(MixAntError, ValueError):
    pass


class ConfigError(MixAntError, ValueError):
    pass


class CheckpointError(MixAntError, OSError):
    pass


class TensorFormatError(MixAntError, ValueError):
    pass


class TrainingDivergedError(MixAntError, RuntimeError):
    """Raised when a training step produces a non-finite loss."""
