"""Input validation helpers shared by the operators and estimators."""

import numbers

import numpy as np
from sklearn.utils import check_array


def check_tokens(x, name="tokens", min_tokens=1):
    """Return ``x`` as a finite 2-D float64 array of shape (P, D)."""
    if hasattr(x, "spatial"):
        x = x.spatial
    x = check_array(x, dtype=np.float64, ensure_min_samples=min_tokens,
                    input_name=name)
    return x


def check_vector(v, name, length=None, nonnegative=False):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    if length is not None and v.shape[0] != length:
        raise ValueError(f"{name} has length {v.shape[0]}, expected {length}")
    if nonnegative and np.any(v < 0):
        raise ValueError(f"{name} must be nonnegative")
    return v


def check_budget(k, n, name="K", low=1):
    """Validate an integer budget ``low <= k <= n``."""
    if isinstance(k, (bool, np.bool_)) or not isinstance(k, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(k).__name__}")
    k = int(k)
    if not low <= k <= n:
        raise ValueError(f"{name}={k} out of range [{low}, {n}]")
    return k


def check_seed(seed):
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, numbers.Integral):
        raise TypeError("seed must be an integer")
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    return seed


def check_labels(labels, name="labels"):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"{name} must be 1-D")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"{name} must hold integer cluster ids")
    return labels.astype(np.int64)


def stable_top(values, k):
    """Indices of the ``k`` largest values, lowest index first on ties, sorted."""
    order = np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")
    return np.sort(order[:k])
