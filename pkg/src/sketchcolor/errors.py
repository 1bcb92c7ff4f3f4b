"""Exception types. Each maps to a stable CLI exit code."""


class SketchColorError(Exception):
    exit_code = 1


class UsageError(SketchColorError):
    exit_code = 2


class InvalidInputError(SketchColorError, ValueError):
    exit_code = 3


class StateError(SketchColorError):
    exit_code = 4


class ConfigError(SketchColorError):
    """Inconsistent configuration (unknown tap id, stage/conditioning mismatch)."""

    exit_code = 2


class NoMatchError(InvalidInputError):
    pass
