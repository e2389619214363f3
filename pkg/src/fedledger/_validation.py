"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length


def check_windows(X, n_channels: int | None = None, window_len: int | None = None) -> np.ndarray:
    """Return ``X`` as a finite float64 array of shape (n_windows, channels, time)."""
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_2d=False)
    if X.ndim != 3:
        raise ValueError(f"expected 3-D windows (n_windows, channels, time), got {X.ndim}-D input")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ValueError(f"X has {X.shape[1]} channels, estimator expects {n_channels}")
    if window_len is not None and X.shape[2] != window_len:
        raise ValueError(f"X has windows of length {X.shape[2]}, estimator expects {window_len}")
    return X


def check_windows_labels(X, y):
    X = check_windows(X)
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("y must be one-dimensional")
    check_consistent_length(X, y)
    return X, y


def check_series(X) -> np.ndarray:
    """(n_samples, n_channels) sensor stream, sklearn row convention."""
    X = check_array(X, dtype=np.float64)
    return X
