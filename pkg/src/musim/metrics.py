"""Distance metrics shared by mining, the loss and evaluation."""

from __future__ import annotations

import numpy as np

_NORM_FLOOR = 1e-24  # guards zero vectors; 1 - 0/eps = 1 for a zero operand


def cosine_distance(x: np.ndarray, y: np.ndarray) -> np.ndarray | float:
    """1 - cos(x, y) over the last axis, in [0, 2].

    Zero vectors take the epsilon path and yield distance 1.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dot = (x * y).sum(axis=-1)
    nx = np.sqrt((x * x).sum(axis=-1))
    ny = np.sqrt((y * y).sum(axis=-1))
    dist = 1.0 - dot / np.maximum(nx * ny, _NORM_FLOOR)
    dist = np.clip(dist, 0.0, 2.0)
    return float(dist) if dist.ndim == 0 else dist
