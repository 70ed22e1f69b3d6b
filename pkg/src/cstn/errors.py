"""Exception kinds; each maps to a distinct CLI exit code."""


class CSTNError(Exception):
    exit_code = 1


class ConfigError(CSTNError, ValueError):
    exit_code = 2


class MissingInputError(CSTNError, FileNotFoundError):
    exit_code = 3


class CorruptArtifactError(CSTNError):
    """Cache or checkpoint is truncated, has a bad magic, or fails validation."""

    exit_code = 4


class VersionMismatchError(CorruptArtifactError):
    pass


class ShapeMismatchError(CorruptArtifactError):
    pass


class NumericalAbort(CSTNError, FloatingPointError):
    exit_code = 5


class DegenerateStatsError(CSTNError, ValueError):
    """Normalisation statistics with ``max == min``."""

    exit_code = 2
