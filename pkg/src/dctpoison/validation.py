"""Input checks shared by the estimators and the functional API."""
from __future__ import annotations

import numpy as np


def check_images(X, min_side: int = 1, allow_single: bool = False) -> np.ndarray:
    """Return ``X`` as a float32 ``N x H x W x 3`` array with values in [0, 1].

    With ``allow_single`` a lone ``H x W x 3`` image is promoted to a batch
    of one.
    """
    X = np.asarray(X)
    if allow_single and X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected an N x H x W x 3 image batch, got shape {X.shape}")
    if X.shape[-1] != 3:
        raise ValueError(f"expected 3 colour channels, got {X.shape[-1]} (shape {X.shape})")
    if X.shape[0] == 0:
        raise ValueError("image batch is empty")
    if min(X.shape[1:3]) < min_side:
        raise ValueError(f"images must be at least {min_side}x{min_side}, got {X.shape[1]}x{X.shape[2]}")
    X = np.asarray(X, dtype=np.float32)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"got {y.shape[0]} labels for {n} images")
    if not np.all(np.isfinite(y)):
        raise ValueError("labels contain NaN or Inf")
    if y.min() < 0 or y.max() > 100:
        raise ValueError(f"MOS labels must lie in [0, 100], got range [{y.min()}, {y.max()}]")
    return y


def check_same_length(a, b, name_a: str = "y", name_b: str = "f") -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {name_a} has {a.size} values, {name_b} has {b.size}")
    if a.size == 0:
        raise ValueError("inputs are empty")
    return a, b


def check_fraction(value: float, name: str, allow_zero: bool = False) -> float:
    value = float(value)
    lo_ok = value >= 0 if allow_zero else value > 0
    if not (lo_ok and value <= 1):
        interval = "[0, 1]" if allow_zero else "(0, 1]"
        raise ValueError(f"{name} must lie in {interval}, got {value}")
    return value
