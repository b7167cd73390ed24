"""Exception types shared across the package."""


class MinidiffError(Exception):
    """Base class for package-specific failures."""


class UnknownTokenError(MinidiffError, ValueError):
    """A prompt word is not in the vocabulary and is not the placeholder."""


class UnknownLayerError(MinidiffError, KeyError):
    """An adapter target name does not resolve to a dense layer."""


class InvalidStateError(MinidiffError, RuntimeError):
    """Operation called in the wrong lifecycle state (e.g. double merge)."""


class NumericDegenerateError(MinidiffError, ArithmeticError):
    """A numeric routine hit a degenerate input (singular alpha, non-PSD cov)."""


class InsufficientSamplesError(MinidiffError, ValueError):
    """Too few samples to estimate the requested statistic."""


class InvalidDatasetError(MinidiffError, ValueError):
    """A dataset directory or manifest violates its structural contract."""


class InsufficientGeneratedError(MinidiffError, ValueError):
    """The generated pool is too small for the requested substitution/expansion."""


class ConfigError(MinidiffError, ValueError):
    """A run configuration file is malformed or carries unknown keys."""


class DependencyMissingError(MinidiffError, RuntimeError):
    """A pipeline stage requires an upstream artifact that does not exist."""

    def __init__(self, stage_needed: str, detail: str = ""):
        self.stage_needed = stage_needed
        msg = f"missing upstream artifact; run stage '{stage_needed}' first"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class CheckpointIOError(MinidiffError, OSError):
    """Checkpoint file missing or unreadable."""


class IncompatibleCheckpointError(MinidiffError, ValueError):
    """Checkpoint schema version does not match this build."""
