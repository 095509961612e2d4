"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import datetime as dt

import numpy as np
from sklearn.utils.validation import check_array


def check_coords(X) -> np.ndarray:
    coords = check_array(X, dtype=np.float64, ensure_min_features=2)
    if coords.shape[1] != 2:
        raise ValueError(f"coordinates must be (N, 2) lat/lng rows, got {coords.shape}")
    if np.abs(coords[:, 0]).max() > 90 or np.abs(coords[:, 1]).max() > 180:
        raise ValueError("latitude must lie in [-90, 90] and longitude in [-180, 180]")
    return coords


def check_series(series, n_points: int) -> np.ndarray:
    arr = check_array(series, dtype=np.float64)
    if arr.shape[1] != n_points:
        raise ValueError(f"series must have one column per point ({n_points}), got {arr.shape[1]}")
    return arr


def check_windows(X, n_points: int, history: int) -> np.ndarray:
    """Accept ``(H, N)`` or ``(B, H, N)`` finite windows and return the 3-d form."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (history, n_points):
        raise ValueError(f"windows must be (B, {history}, {n_points}), got {np.shape(X)}")
    if not np.isfinite(arr).all():
        raise ValueError("windows contain NaN or infinite values")
    return arr


def check_timestamps(timestamps, n: int) -> list[dt.datetime]:
    if isinstance(timestamps, dt.datetime):
        timestamps = [timestamps]
    out = list(timestamps)
    if len(out) != n:
        raise ValueError(f"expected {n} timestamps, got {len(out)}")
    if not all(isinstance(t, dt.datetime) for t in out):
        raise TypeError("timestamps must be datetime.datetime instances")
    return out
