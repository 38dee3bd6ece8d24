"""
Exception hierarchy for the fusion lab.
Every failure the CLI knows how to map to an exit code derives from FusionLabError.
"""
from typing import Dict, Optional


class FusionLabError(Exception):
    """Base class for all expected failures"""
    exit_code = 3


class ConfigError(FusionLabError):
    """Unknown config key, bad value or invalid preset"""
    exit_code = 2


class ShapeMismatchError(FusionLabError, ValueError):
    pass


class InvalidVarianceError(FusionLabError, ValueError):
    pass


class EmptyContextSet(FusionLabError):
    """Raised by aggregation when asked to fuse zero feature maps.

    Callers catch it and take the no-context path instead of inventing a neutral element.
    """


class DataGenerationError(FusionLabError):
    pass


class ManifestError(FusionLabError):
    pass


class NonFiniteLikelihoodError(FusionLabError, ValueError):
    def __init__(self, message: str, diagnostics: Optional[Dict] = None):
        self.diagnostics = diagnostics or {}
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"{message} ({details})" if details else message)


class TrainingAborted(FusionLabError):
    def __init__(self, skipped: int, total: int, epoch: int):
        self.skipped = skipped
        self.total = total
        self.epoch = epoch
        super().__init__(
            f"Epoch {epoch}: {skipped}/{total} batches skipped for non-finite loss, aborting run"
        )


class CheckpointError(FusionLabError):
    pass


class ReportError(FusionLabError):
    pass


class AcceptanceFailure(FusionLabError):
    exit_code = 4
