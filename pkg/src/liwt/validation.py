"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numbers

import numpy as np


def check_image(img, name: str = "image", allow_odd: bool = True) -> np.ndarray:
    """Return ``img`` as a float64 ``H x W x 3`` array in ``[0, 1]``."""
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        arr = arr / 255.0
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name}: expected an H x W x 3 array, got shape {arr.shape}")
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ValueError(f"{name}: image must be at least 2x2, got {arr.shape[:2]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains NaN or inf")
    if arr.min() < -1e-6 or arr.max() > 1 + 1e-6:
        raise ValueError(f"{name}: values must lie in [0, 1]")
    if not allow_odd and (arr.shape[0] % 2 or arr.shape[1] % 2):
        raise ValueError(f"{name}: extents must be even, got {arr.shape[:2]}")
    return arr


def check_images(images, name: str = "X") -> list[np.ndarray]:
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    out = [check_image(im, f"{name}[{i}]") for i, im in enumerate(images)]
    if not out:
        raise ValueError(f"{name}: no images given")
    return out


def check_scale(scale) -> tuple[float, float]:
    """Accept ``2``, ``2.2``, ``"2x3"`` or ``(s_h, s_w)``; every factor must be >= 1."""
    if isinstance(scale, str):
        parts = scale.lower().replace("×", "x").split("x")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ValueError(f"cannot parse scale {scale!r}") from None
    elif isinstance(scale, numbers.Real):
        vals = [float(scale)]
    else:
        vals = [float(v) for v in scale]
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or not all(np.isfinite(vals)) or min(vals) < 1:
        raise ValueError(f"scale must be one or two factors >= 1, got {scale!r}")
    return vals[0], vals[1]
