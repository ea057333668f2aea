"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from fbseg.polygons import ValidationError


def check_image_batch(X) -> np.ndarray:
    """Coerce to a float64 (n_samples, height, width) stack.

    Accepts a single (H, W) image, an (N, H, W) stack, or an (N, 1, H, W)
    tensor; spatial extents must be multiples of 4 (two pooling levels).
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ValidationError(
            f"expected images shaped (n, H, W), (H, W) or (n, 1, H, W); got {np.shape(X)}")
    if arr.shape[0] == 0:
        raise ValidationError("empty image batch")
    if arr.shape[1] % 4 or arr.shape[2] % 4:
        raise ValidationError(
            f"image extents must be divisible by 4, got {arr.shape[1]}x{arr.shape[2]}")
    if not np.isfinite(arr).all():
        raise ValidationError("images contain non-finite values")
    return arr


def check_mask_batch(y, images: np.ndarray, n_classes: int) -> np.ndarray:
    """Coerce targets to a uint8 (n_samples, height, width) label stack
    aligned with ``images`` and valued in [0, n_classes)."""
    arr = np.asarray(y)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValidationError(f"expected masks shaped like the images, got {np.shape(y)}")
    if arr.shape != images.shape:
        raise ValidationError(
            f"masks shaped {arr.shape} do not match images {images.shape}")
    values = np.unique(arr)
    if not np.isin(values, np.arange(n_classes)).all():
        raise ValidationError(
            f"mask labels must lie in [0, {n_classes}), found {values[:8]}")
    return arr.astype(np.uint8)
