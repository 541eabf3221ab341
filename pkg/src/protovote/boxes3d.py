"""Axis-aligned 3D box overlap and non-maximum suppression."""

from __future__ import annotations

import numpy as np


def iou3d_axis_aligned(center_a, size_a, center_b, size_b) -> float:
    """Intersection over union of two axis-aligned boxes given as
    (center, size) pairs with positive extents."""
    center_a = np.asarray(center_a, dtype=np.float64)
    center_b = np.asarray(center_b, dtype=np.float64)
    size_a = np.asarray(size_a, dtype=np.float64)
    size_b = np.asarray(size_b, dtype=np.float64)
    if np.any(size_a <= 0) or np.any(size_b <= 0):
        raise ValueError("box sizes must be positive")
    lo = np.maximum(center_a - size_a / 2, center_b - size_b / 2)
    hi = np.minimum(center_a + size_a / 2, center_b + size_b / 2)
    inter = float(np.prod(np.maximum(hi - lo, 0.0)))
    union = float(np.prod(size_a) + np.prod(size_b)) - inter
    return inter / union


def nms3d(centers: np.ndarray, sizes: np.ndarray, scores: np.ndarray,
          iou_threshold: float = 0.25) -> np.ndarray:
    """Greedy suppression by descending score; returns kept indices in
    score order (ties broken by lower index)."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    kept: list[int] = []
    for i in order:
        if all(iou3d_axis_aligned(centers[i], sizes[i], centers[j], sizes[j])
               <= iou_threshold for j in kept):
            kept.append(int(i))
    return np.asarray(kept, dtype=np.intp)
