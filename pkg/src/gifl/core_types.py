"""Pixel- and token-domain array conventions plus image/mask file IO.

Images are ``float64`` arrays of shape ``(H, W, 3)`` with values in ``[0, 1]``.
Binary masks are ``uint8`` arrays of shape ``(H, W)`` holding ``{0, 1}``, where
1 marks forged pixels. Probability masks are ``float64`` ``(H, W)`` in ``[0, 1]``.
Conversion to 8-bit happens only at file boundaries.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from gifl.errors import FormatError, ShapeError

PathLike = Union[str, os.PathLike]

DEFAULT_SIZE = 448
DATASET_SIZE = 512
MASK_THRESHOLD = 128


def _open(path: PathLike) -> PILImage.Image:
    try:
        img = PILImage.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise OSError(f"cannot decode raster image {path!s}: {exc}") from exc
    if img.width == 0 or img.height == 0:
        raise FormatError(f"{path!s} has zero dimension {img.size}")
    return img


def _resize_float(channel: np.ndarray, size: int) -> np.ndarray:
    # mode "F" keeps sub-8-bit precision through the interpolation
    pil = PILImage.fromarray(channel.astype(np.float32), mode="F")
    return np.asarray(pil.resize((size, size), PILImage.BILINEAR), dtype=np.float64)


def load_image(path: PathLike, target_size: int = DEFAULT_SIZE) -> np.ndarray:
    """Read an RGB image, resize it bilinearly to a square, scale to [0, 1].

    Raises:
        OSError: the file is unreadable or not a raster image.
        FormatError: the image has a zero dimension.
    """
    img = _open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if img.size != (target_size, target_size):
        arr = np.stack([_resize_float(arr[..., c], target_size) for c in range(3)], axis=-1)
    return np.clip(arr, 0.0, 1.0)


def save_image(img: np.ndarray, path: PathLike) -> None:
    """Write an image array as 8-bit RGB; the format follows the suffix."""
    check_image(img)
    data = np.round(img * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(data, mode="RGB").save(path)


def load_mask(path: Optional[PathLike], target_size: int = DEFAULT_SIZE) -> np.ndarray:
    """Read a mask, nearest-resize it, binarize at 128/255.

    ``path=None`` denotes an authentic sample and yields an all-zero mask.
    """
    if path is None:
        return np.zeros((target_size, target_size), dtype=np.uint8)
    img = _open(path).convert("L")
    if img.size != (target_size, target_size):
        img = img.resize((target_size, target_size), PILImage.NEAREST)
    return (np.asarray(img) >= MASK_THRESHOLD).astype(np.uint8)


def save_mask(mask: np.ndarray, path: PathLike) -> None:
    """Write a binary mask as a single-channel PNG (0 / 255)."""
    check_mask(mask)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray((mask * 255).astype(np.uint8), mode="L").save(path)


def save_prob(prob: np.ndarray, path: PathLike) -> None:
    """Write a probability map as an 8-bit grayscale PNG."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    data = np.round(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="L").save(path)


def check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise FormatError("image values must lie in [0, 1]")


def check_mask(mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise ShapeError(f"mask must be (H, W), got {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise FormatError("mask values must be strictly binary")


def mask_to_token_grid(mask: np.ndarray, patch: int) -> np.ndarray:
    """Average a pixel mask over non-overlapping ``patch x patch`` cells.

    >>> m = np.zeros((4, 4)); m[:2, :2] = 1
    >>> mask_to_token_grid(m, 2)
    array([[1., 0.],
           [0., 0.]])
    """
    h, w = mask.shape
    if h % patch or w % patch:
        raise ShapeError(f"mask {mask.shape} not divisible by patch {patch}")
    cells = np.asarray(mask, dtype=np.float64).reshape(h // patch, patch, w // patch, patch)
    return cells.mean(axis=(1, 3))
