"""Input validation helpers for arrays flowing through the pipeline.

Images are numpy arrays shaped (H, W, 3) with float values in [0, 1];
batches add a leading sample axis. Labels are integer class indices.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .labels import NUM_CLASSES


def check_image(image, *, require_square: bool = False) -> np.ndarray:
    """Validate a single (H, W, 3) image and return it as float32."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected image of shape (H, W, 3), got {arr.shape}")
    if require_square and arr.shape[0] != arr.shape[1]:
        raise ValidationError(f"expected a square image, got {arr.shape[0]}x{arr.shape[1]}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValidationError(f"expected float image values in [0, 1], got dtype {arr.dtype}")
    if arr.size and (arr.min() < -1e-6 or arr.max() > 1 + 1e-6):
        raise ValidationError(
            f"image values outside [0, 1]: min={arr.min():.4g} max={arr.max():.4g}"
        )
    if arr.dtype not in (np.float32, np.float64):  # keep doubles for FD checks
        arr = arr.astype(np.float32)
    return arr


def check_image_batch(X, *, require_square: bool = False) -> np.ndarray:
    """Validate an (N, H, W, 3) batch; a single image is promoted to a batch."""
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[np.newaxis]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValidationError(f"expected batch of shape (N, H, W, 3), got {np.asarray(X).shape}")
    if require_square and arr.shape[1] != arr.shape[2]:
        raise ValidationError(f"expected square images, got {arr.shape[1]}x{arr.shape[2]}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValidationError(f"expected float image values in [0, 1], got dtype {arr.dtype}")
    if arr.size and (arr.min() < -1e-6 or arr.max() > 1 + 1e-6):
        raise ValidationError(
            f"image values outside [0, 1]: min={arr.min():.4g} max={arr.max():.4g}"
        )
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


def check_labels(y, *, num_classes: int = NUM_CLASSES, length: int | None = None) -> np.ndarray:
    """Validate integer class labels in [0, num_classes)."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValidationError(f"expected 1-d label array, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if np.issubdtype(arr.dtype, np.floating) and np.all(arr == arr.astype(np.int64)):
            arr = arr.astype(np.int64)
        else:
            raise ValidationError(f"expected integer labels, got dtype {arr.dtype}")
    arr = arr.astype(np.int64, copy=False)
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise ValidationError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{arr.min()}, {arr.max()}]"
        )
    if length is not None and len(arr) != length:
        raise ValidationError(f"expected {length} labels, got {len(arr)}")
    return arr


def check_fraction(name: str, value: float, *, closed_top: bool = True) -> float:
    """Validate a scalar in [0, 1] (or [0, 1) when closed_top is False)."""
    value = float(value)
    if not (0.0 <= value <= 1.0) or (not closed_top and value == 1.0):
        top = "1]" if closed_top else "1)"
        raise ValidationError(f"{name} must be in [0, {top}, got {value}")
    return value
