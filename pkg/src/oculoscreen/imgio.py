"""PNG/JPEG reading and writing as float RGB arrays in [0, 1]."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import UnreadableImageError


def load_image(path: str | Path) -> np.ndarray:
    """Decode an image file into a float32 (H, W, 3) array scaled to [0, 1]."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32)
    except (FileNotFoundError, UnidentifiedImageError, OSError, ValueError) as exc:
        raise UnreadableImageError(f"{path}: {exc}") from exc
    return arr / 255.0


def decode_image(data: bytes) -> np.ndarray:
    """Decode raw PNG/JPEG bytes; same contract as :func:`load_image`."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise UnreadableImageError(str(exc)) from exc
    return arr / 255.0


def save_image(arr: np.ndarray, path: str | Path) -> None:
    """Write a float [0, 1] (H, W, 3) array as an 8-bit image file."""
    data = np.clip(np.asarray(arr) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)
