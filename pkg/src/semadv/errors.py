"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Arrays have incompatible or invalid shapes."""


class FormatError(ValueError):
    """File content violates the expected format (channel count, label range, ...)."""


class SelectionError(ValueError):
    """Region selection produced or received an empty/invalid set."""


class UndefinedRateError(ValueError):
    """Value rate requested in mass mode on an all-zero activation map."""


class UnsupportedObjectiveError(TypeError):
    """Objective spec is unknown or not differentiable."""


class ConfigurationError(ValueError):
    """Invalid run or model configuration."""


class TrainingError(RuntimeError):
    """Detector training cannot proceed (e.g. single-class dataset)."""


class EvaluationError(RuntimeError):
    """Evaluation has no eligible samples or inconsistent inputs."""
