"""Input validation helpers shared by the estimators."""

import numpy as np

from .court import Possession, TrackingError


def check_possessions(possessions, min_count=1):
    """Return ``possessions`` as a list, checking type and minimum size."""
    if isinstance(possessions, Possession):
        possessions = [possessions]
    possessions = list(possessions)
    if len(possessions) < min_count:
        raise ValueError(f"expected at least {min_count} possession(s), got {len(possessions)}")
    for p in possessions:
        if not isinstance(p, Possession):
            raise TypeError(f"expected Possession, got {type(p).__name__}")
        if len(p) == 0:
            raise TrackingError(f"possession {p.id} has no frames")
    return possessions


def check_simplex_weights(w, name="weights", atol=1e-12):
    w = np.asarray(w, dtype=float)
    if np.any(w < -atol) or abs(w.sum() - 1.0) > max(atol, 1e-9):
        raise ValueError(f"{name} must be nonnegative and sum to 1, got {w}")
    return w


def check_probability(x, name, open_interval=True):
    x = float(x)
    ok = 0.0 < x < 1.0 if open_interval else 0.0 <= x <= 1.0
    if not ok:
        raise ValueError(f"{name} must lie in {'(0, 1)' if open_interval else '[0, 1]'}, got {x}")
    return x


def check_positive(x, name):
    x = float(x)
    if not x > 0:
        raise ValueError(f"{name} must be positive, got {x}")
    return x


def check_nonnegative_matrix(A, name="matrix"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite entries")
    if np.any(A < 0):
        raise ValueError(f"{name} must be nonnegative")
    return A
