"""Shared exception types. The CLI maps these onto exit codes."""


class BevnextError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(BevnextError):
    """A tensor dimension is inconsistent with its contract.

    Messages name the offending axis so callers can diagnose without a
    stack dive. CLI exit code 3.
    """


class ConfigError(BevnextError):
    """A configuration file or value is invalid. CLI exit code 2."""


class FormatError(BevnextError):
    """A binary or text artifact on disk is malformed. CLI exit code 2."""


class StageError(BevnextError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[stage {stage}] {message}")
        self.stage = stage
