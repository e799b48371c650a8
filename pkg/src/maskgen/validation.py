"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class MaskgenError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(MaskgenError, ValueError):
    """An input violated a documented precondition."""


class UndefinedDistanceError(MaskgenError):
    """A boundary distance was requested between sets where it is undefined."""


def as_binary_mask(mask, name: str = "mask") -> np.ndarray:
    """Coerce to a 2D uint8 array of {0, 1}; reject anything else."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.isin(arr, (0, 1)).all():
        bad = np.unique(arr[~np.isin(arr, (0, 1))])[:4]
        raise ValidationError(f"{name} must contain only 0/1 pixels, found values {bad.tolist()}")
    return arr.astype(np.uint8)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "masks") -> None:
    if a.shape != b.shape:
        raise ValidationError(f"{what} must have identical dimensions, got {a.shape} vs {b.shape}")


def check_divisible(height: int, width: int, patch_size: int) -> None:
    """Mask dims must be positive multiples of the patch size."""
    if patch_size <= 0:
        raise ValidationError(f"patch_size must be positive, got {patch_size}")
    if height <= 0 or width <= 0:
        raise ValidationError(f"mask dimensions must be positive, got {height}x{width}")
    rh, rw = height % patch_size, width % patch_size
    if rh or rw:
        raise ValidationError(
            f"mask dimensions {height}x{width} not divisible by patch_size {patch_size} "
            f"(remainders {rh}, {rw})"
        )


def check_box(box, name: str = "box") -> tuple[float, float, float, float]:
    """Validate an (x_min, y_min, x_max, y_max) box with positive extent."""
    if len(box) != 4:
        raise ValidationError(f"{name} must have 4 coordinates, got {len(box)}")
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x0 < x1 and y0 < y1):
        raise ValidationError(f"{name} must satisfy x_min < x_max and y_min < y_max, got {box}")
    return x0, y0, x1, y1


def check_finite(arr: np.ndarray, name: str = "values") -> None:
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contain non-finite entries")
