"""Image loading and saving conventions.

Reference photos are RGB in [-1, 1]; sketches are single-channel in [0, 1]
with strokes = 1 (white strokes on a black background).
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def load_image(source, resolution: int) -> torch.Tensor:
    """RGB image as a (3, R, R) tensor in [-1, 1], resized if needed."""
    img = _open(source).convert("RGB")
    if img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr.transpose(2, 0, 1))


def load_sketch(source, resolution: int) -> torch.Tensor:
    """Single-channel sketch as an (R, R) tensor in [0, 1], strokes = 1.

    Resolution must already match the generation size; mismatches are the
    caller's error to surface.
    """
    img = _open(source).convert("L")
    if img.size != (resolution, resolution):
        raise ValueError(
            f"sketch is {img.size[0]}x{img.size[1]} but the backbone expects "
            f"{resolution}x{resolution}"
        )
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def load_region_mask(source, resolution: int) -> np.ndarray:
    """Single-channel region map (face = 1) aligned to the reference image."""
    img = _open(source).convert("L")
    if img.size != (resolution, resolution):
        raise ValueError(
            f"region mask is {img.size[0]}x{img.size[1]} but the image is "
            f"{resolution}x{resolution}"
        )
    return np.asarray(img, dtype=np.float32) / 255.0


def image_to_png_bytes(image: torch.Tensor) -> bytes:
    """(3, H, W) tensor in [-1, 1] to PNG bytes."""
    arr = image.detach().cpu().float().numpy()
    arr = np.clip((arr + 1.0) * 127.5, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def save_image(image: torch.Tensor, path) -> None:
    Path(path).write_bytes(image_to_png_bytes(image))


def _open(source) -> Image.Image:
    if isinstance(source, Image.Image):
        return source
    if isinstance(source, (bytes, bytearray)):
        return Image.open(io.BytesIO(source))
    return Image.open(source)
