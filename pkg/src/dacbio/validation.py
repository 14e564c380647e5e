"""Input validation helpers shared by the estimators and the pipeline functions."""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when an array or tensor has an incompatible shape."""


def check_spacing(spacing) -> tuple[float, float]:
    sx, sy = (float(v) for v in spacing)
    if not (np.isfinite(sx) and np.isfinite(sy)) or sx <= 0 or sy <= 0:
        raise ValueError(f"pixel spacing must be positive, got {spacing!r}")
    return sx, sy


def check_image_batch(X, *, multiple_of: int | None = None) -> np.ndarray:
    """Coerce ``X`` to a float32 ``(n, H, W)`` array with values in [0, 1].

    A single ``(H, W)`` image is promoted to a batch of one, and a
    ``(n, 1, H, W)`` batch has its channel axis squeezed.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    elif X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3:
        raise ShapeError(f"expected images shaped (n, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ShapeError("empty image batch")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    if multiple_of is not None:
        _, h, w = X.shape
        if h % multiple_of or w % multiple_of:
            raise ShapeError(f"spatial size {h}x{w} is not divisible by {multiple_of}")
    return X


def check_label_batch(Y, n: int, shape: tuple[int, int]) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float32)
    if Y.ndim == 3:
        Y = Y[None]
    if Y.shape != (n, 3, *shape):
        raise ShapeError(f"expected labels shaped {(n, 3, *shape)}, got {Y.shape}")
    if Y.min() < 0.0 or Y.max() > 1.0:
        raise ValueError("label values must lie in [0, 1]")
    return Y


def check_probmap(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 3 or p.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) probability map, got {p.shape}")
    if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("probability map values must lie in [0, 1]")
    return p
