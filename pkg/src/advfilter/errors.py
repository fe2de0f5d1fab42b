"""
Error taxonomy for advfilter.

Every error raised on purpose derives from AdvFilterError and carries the
exit code the CLI reports for it:
- 2: configuration / usage problems
- 3: missing or corrupted artifacts
- 4: numerical failures (NaN gradients, divergence, broken freeze)
"""

from __future__ import annotations

from typing import Any


class AdvFilterError(Exception):
    """Base class for all advfilter errors."""
    exit_code: int = 1


class ConfigError(AdvFilterError):
    """Invalid or inconsistent configuration."""
    exit_code = 2


class MissingArtifactError(AdvFilterError):
    """A required checkpoint, dataset or manifest does not exist."""
    exit_code = 3


class IntegrityError(MissingArtifactError):
    """An artifact exists but its checksum or fingerprint does not match its manifest."""

    def __init__(self, message: str, artifact: str | None = None):
        super().__init__(message)
        self.artifact = artifact


class NumericalError(AdvFilterError):
    """NaN/inf values or other numerical breakdowns."""
    exit_code = 4


class TrainingDiverged(NumericalError):
    """Training loss became non-finite. Holds the last finite state dict."""

    def __init__(self, message: str, last_good_state: dict[str, Any] | None = None):
        super().__init__(message)
        self.last_good_state = last_good_state


class FreezeViolation(NumericalError):
    """A parameter set declared frozen changed during training."""


class ShapeError(AdvFilterError, ValueError):
    """Tensor shapes or architectures do not line up."""
    exit_code = 2


class DatasetError(AdvFilterError):
    """Dataset source missing, too small or too corrupted."""
    exit_code = 3


class AttackError(AdvFilterError):
    """Attack generation cannot proceed (bad spec, non-differentiable model)."""
    exit_code = 2


class RoutingError(AdvFilterError):
    """A training batch strength belongs to no configured domain."""
    exit_code = 2
