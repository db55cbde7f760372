"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np

from .observe import PartialObservation
from .voxelcore import OrientedBox, VoxelGrid


def check_boxes(boxes, dtype=np.float64) -> np.ndarray:
    """Coerce boxes (``OrientedBox`` objects, ``(n, 8, 3)`` or ``(n, 24)``) to ``(n, 24)``."""
    if isinstance(boxes, OrientedBox):
        boxes = [boxes]
    if isinstance(boxes, (list, tuple)) and boxes and isinstance(boxes[0], OrientedBox):
        arr = np.stack([b.as_vector() for b in boxes])
    else:
        arr = np.asarray(boxes, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        arr = arr.reshape(arr.shape[0], -1)
    if arr.ndim != 2 or arr.shape[1] != 24:
        raise ValueError(f"expected boxes as 24-vectors, got array of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("boxes contain non-finite values")
    return arr.astype(dtype)


def check_observations(X, dtype=np.float32) -> np.ndarray:
    """Coerce observations to a ``(n, 2, R, R, R)`` array (occupied, free)."""
    if isinstance(X, PartialObservation):
        X = [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], PartialObservation):
        arr = np.stack([x.stacked(dtype) for x in X])
    else:
        arr = np.asarray(X, dtype=dtype)
        if arr.ndim == 4 and arr.shape[0] == 2:
            arr = arr[None]
    if arr.ndim != 5 or arr.shape[1] != 2 or len(set(arr.shape[2:])) != 1:
        raise ValueError(f"expected observations shaped (n, 2, R, R, R), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("observations contain non-finite values")
    return arr


def check_shapes(y, dtype=np.float32) -> np.ndarray:
    """Coerce target shapes to a ``(n, R, R, R)`` array."""
    if isinstance(y, VoxelGrid):
        y = [y]
    if isinstance(y, (list, tuple)) and y and isinstance(y[0], VoxelGrid):
        arr = np.stack([g.values for g in y]).astype(dtype)
    else:
        arr = np.asarray(y, dtype=dtype)
        if arr.ndim == 3:
            arr = arr[None]
    if arr.ndim != 4 or len(set(arr.shape[1:])) != 1:
        raise ValueError(f"expected shapes (n, R, R, R), got {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValueError("occupancies must lie in [0, 1]")
    return arr


def check_consistent_length(*arrays):
    lengths = {len(a) for a in arrays if a is not None}
    if len(lengths) > 1:
        raise ValueError(f"inconsistent numbers of samples: {sorted(lengths)}")
