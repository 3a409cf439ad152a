"""Image array utilities: ingest, save, hashing, PNG round trips.

The canonical in-memory image is a float32 numpy array of shape (H, W, 3),
RGB, values in [0, 1]. Identity of an image is the sha256 of its 8-bit RGB
bytes, so an image loaded from PNG hashes to the same id as the array that
produced the PNG.
"""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidImage


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    if not isinstance(img, np.ndarray):
        raise InvalidImage(f"{name} must be a numpy array, got {type(img).__name__}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidImage(f"{name} must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise InvalidImage(f"{name} has empty spatial dims {img.shape}")
    if img.dtype not in (np.float32, np.float64):
        raise InvalidImage(f"{name} must be float32 or float64, got {img.dtype}")
    if not np.isfinite(img).all():
        raise InvalidImage(f"{name} contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise InvalidImage(
            f"{name} values outside [0, 1]: min {img.min():.4g}, max {img.max():.4g}"
        )
    return img


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize a [0,1] float image to 8-bit, round-half-away like PIL."""
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 255.0).copy()


def image_id(img: np.ndarray) -> str:
    """Content hash: sha256 hex digest of the canonical 8-bit RGB bytes."""
    canon = np.ascontiguousarray(to_uint8(img))
    return hashlib.sha256(canon.tobytes()).hexdigest()


def quantized(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit so the array matches its PNG byte-exactly."""
    return from_uint8(to_uint8(img))


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


def save_image(img: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")
    return path


def encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


def text_hash(text: str) -> str:
    """Stable hash used to tie embeddings back to their source text."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
