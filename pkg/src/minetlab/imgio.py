"""PNG/JPEG loading and saving helpers shared by data, metrics and the CLI."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

#: 8-bit masks binarize at half the code range: values > 127 become 1
MASK_THRESHOLD = 127


def list_stems(directory) -> dict:
    """Map file stem -> path for every supported image in a directory."""
    directory = Path(directory)
    out = {}
    for path in sorted(directory.iterdir()) if directory.is_dir() else []:
        if path.suffix.lower() in IMAGE_EXTENSIONS:
            out[path.stem] = path
    return out


def load_rgb(path, resize_to=None) -> np.ndarray:
    """RGB image as float32 H x W x 3 in [0, 1]; bilinear resize if asked."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if resize_to is not None:
            img = img.resize((resize_to[1], resize_to[0]), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32) / 255.0


def load_gray(path) -> np.ndarray:
    """Grayscale image as float64 H x W in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def load_mask(path, resize_to=None) -> np.ndarray:
    """Binary mask from an 8-bit image: nearest resize, then > 127."""
    with Image.open(path) as img:
        img = img.convert("L")
        if resize_to is not None:
            img = img.resize((resize_to[1], resize_to[0]), Image.NEAREST)
        raw = np.asarray(img, dtype=np.uint8)
    return (raw > MASK_THRESHOLD).astype(np.float32)


def save_gray_png(path, values01) -> None:
    """Write a [0, 1] map as an 8-bit grayscale PNG via round(255 * v)."""
    arr = np.asarray(values01, dtype=np.float64)
    quantized = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(quantized, mode="L").save(path)
