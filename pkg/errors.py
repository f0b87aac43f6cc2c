"""
Error types for the gradsieve pipeline
Library code raises these; gradsieve.py maps them to exit codes
"""

from typing import List, Optional, Sequence, Tuple


class GradSieveError(Exception):
    """Base class for all pipeline errors"""


class InvalidMaskError(GradSieveError):
    """Token mask does not line up with the target sequence"""


class InvalidExampleError(GradSieveError):
    """Example has an empty side or out-of-vocabulary ids"""


class NumericOverflowError(GradSieveError):
    """Gradient contains NaN/inf"""

    def __init__(self, component: str, message: Optional[str] = None):
        self.component = component
        super().__init__(message or f"Non-finite gradient in component '{component}'")


class TrainingDivergedError(GradSieveError):
    """Validation loss became NaN during training"""

    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"Training diverged at epoch {epoch} (validation loss is NaN)")


class IncompatibleGradientError(GradSieveError):
    """Two gradient vectors do not share a layout table"""


class CheckpointMismatchError(GradSieveError):
    """Per-checkpoint gradient lists do not line up"""


class CheckpointFormatError(GradSieveError):
    """Checkpoint file is not a readable GSCK file"""


class ProbeSpecError(GradSieveError):
    """Probe case lacks a field the requested variant needs"""


class CacheMissError(GradSieveError):
    """Requested (example, epoch) gradients are not in the cache"""

    def __init__(self, missing: Sequence[Tuple[int, int]]):
        self.missing = list(missing)
        preview = ', '.join(f"({ex}, {ep})" for ex, ep in self.missing[:10])
        more = f" ... (+{len(self.missing) - 10} more)" if len(self.missing) > 10 else ""
        super().__init__(f"Gradient cache miss for (example, epoch): {preview}{more}")


class CacheIntegrityError(GradSieveError):
    """Gradient cache file is corrupt"""

    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class ConfigValidationError(GradSieveError):
    """Experiment config failed validation"""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("Invalid config: " + "; ".join(self.errors))


class MissingPrerequisiteError(GradSieveError):
    """An earlier pipeline stage has not produced its output"""

    def __init__(self, path: str, message: Optional[str] = None):
        self.path = path
        super().__init__(message or f"Missing prerequisite: expected {path}")
