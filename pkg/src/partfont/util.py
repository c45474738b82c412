"""Small shared helpers for image IO."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_glyph_png(pixels: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels), mode="L").save(path)
    return path


def png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(pixels), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def load_grayscale(data: bytes | str | Path) -> np.ndarray:
    """Decode an image into float [0,1], converting RGB to grayscale."""
    if isinstance(data, (bytes, bytearray)):
        img = Image.open(io.BytesIO(data))
    else:
        img = Image.open(data)
    return np.asarray(img.convert("L"), dtype=np.float32) / 255.0


def image_grid(images: list[np.ndarray], cols: int = 7, pad: int = 2) -> np.ndarray:
    """Tile equally sized grayscale images into one array (white separators)."""
    if not images:
        raise ValueError("no images to tile")
    h, w = images[0].shape
    rows = (len(images) + cols - 1) // cols
    grid = np.ones((rows * h + (rows + 1) * pad, cols * w + (cols + 1) * pad), dtype=np.float32)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        y = pad + r * (h + pad)
        x = pad + c * (w + pad)
        grid[y : y + h, x : x + w] = img
    return grid
