"""Input validation shared by the public entry points."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .errors import InvalidImage, ShapeMismatch
from .images import check_image

__all__ = ["check_image", "check_image_list", "check_paired_lists", "check_is_fitted"]


def check_image_list(images, name: str = "X") -> list[np.ndarray]:
    """Validate a sequence of HWC float images, returning it as a list."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    try:
        items = list(images)
    except TypeError:
        raise InvalidImage(f"{name} must be a sequence of (H, W, 3) images") from None
    if not items:
        raise InvalidImage(f"{name} is empty")
    return [check_image(img, f"{name}[{i}]") for i, img in enumerate(items)]


def check_paired_lists(x, y) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Validate aligned degraded/clean image lists of equal length and shape."""
    degraded = check_image_list(x, "X")
    clean = check_image_list(y, "y")
    if len(degraded) != len(clean):
        raise ShapeMismatch(f"X has {len(degraded)} images but y has {len(clean)}")
    for i, (d, c) in enumerate(zip(degraded, clean)):
        if d.shape != c.shape:
            raise ShapeMismatch(
                f"pair {i} shapes differ: X {d.shape} vs y {c.shape}"
            )
    return degraded, clean


def check_is_fitted(estimator, attribute: str = "network_") -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() or pass "
            "a checkpoint path"
        )
