"""Exception hierarchy shared across the package.

Every raisable condition gets its own class so callers can catch precisely;
the CLI maps any :class:`LmdirError` to exit code 1.
"""

from __future__ import annotations


class LmdirError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(LmdirError):
    """Inputs have incompatible shapes or dtypes."""


class InvalidImage(LmdirError):
    """Array is not a valid (H, W, 3) float image in [0, 1]."""


class ImageTooSmall(LmdirError):
    """Image is below the minimum spatial size for the operation."""


class InvalidConfig(LmdirError):
    """Network or training configuration violates its invariants."""


class OddChannelCount(LmdirError):
    """A channel split was requested on an odd channel count."""


class NonFiniteActivation(LmdirError):
    """A NaN or Inf appeared in an intermediate activation.

    Carries stage/level context so the failing block can be located.
    """

    def __init__(self, stage: str, level: int | None = None, index: int | None = None):
        where = stage
        if level is not None:
            where += f" level {level}"
        if index is not None:
            where += f" block {index}"
        super().__init__(f"non-finite activation in {where}")
        self.stage = stage
        self.level = level
        self.index = index


class NonFiniteLoss(LmdirError):
    """Training loss became NaN or Inf."""


class InvalidText(LmdirError):
    """Text input is empty or violates prior-text separation rules."""


class ProviderUnavailable(LmdirError):
    """A prior provider could not be reached after all retries."""


class MalformedResponse(LmdirError):
    """A provider responded with a payload that cannot be parsed."""


class EmbeddingShapeMismatch(LmdirError):
    """Text encoder returned an embedding of unexpected shape."""


class CacheCorrupt(LmdirError):
    """A stored bundle failed hash verification."""


class NotFound(LmdirError):
    """Requested bundle or image id is not in the store."""


class MissingBundle(LmdirError):
    """No prior bundle exists for an image required by training/eval.

    The message names the offending image_id.
    """

    def __init__(self, image_id: str):
        super().__init__(f"no prior bundle for image_id {image_id}")
        self.image_id = image_id


class DatasetEmpty(LmdirError):
    """A task's dataset directory contains no usable images."""


class UnknownTask(LmdirError):
    """Task id is not one of the supported degradation tasks."""


class CheckpointMismatch(LmdirError):
    """Checkpoint config does not match the requested network config."""


class CheckpointCorrupt(LmdirError):
    """Checkpoint archive is unreadable or fails verification."""


class DegenerateReference(UserWarning):
    """Synthesized reference image is constant-valued (warning, not error)."""
