"""Input checks shared by the curve-fitting estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_consistent_length, column_or_1d


def check_xy(x, y, sample_weight=None, min_points: int = 1):
    """Return float 1-d ``x``, ``y`` and positive finite weights (default ones)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2 and x.shape[1] == 1:
        x = x[:, 0]
    x = column_or_1d(x)
    y = column_or_1d(np.asarray(y, dtype=float))
    check_consistent_length(x, y)
    if sample_weight is None:
        w = np.ones_like(y)
    else:
        w = column_or_1d(np.asarray(sample_weight, dtype=float))
        check_consistent_length(y, w)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("sample_weight must be finite and non-negative")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("x and y must be finite")
    if len(x) < min_points:
        raise ValueError(f"need at least {min_points} points, got {len(x)}")
    return x, y, w


def check_x(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 2 and x.shape[1] == 1:
        x = x[:, 0]
    return column_or_1d(x)


def poisson_weights(counts) -> np.ndarray:
    """Inverse variances for binned counts, with variance floored at one count."""
    return 1.0 / np.maximum(np.asarray(counts, dtype=float), 1.0)
