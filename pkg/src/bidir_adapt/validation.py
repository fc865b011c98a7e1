"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np


def check_images(X, name="X", value_range=(0.0, 255.0), n_channels=None) -> np.ndarray:
    """Return ``X`` as a float32 ``(N, H, W, C)`` array, validating shape and range.

    A rank-3 ``(N, H, W)`` input is treated as single-channel.
    """
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"{name} must be numeric, got dtype {X.dtype}")
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (N, H, W) or (N, H, W, C); got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if X.shape[-1] not in (1, 3):
        raise ValueError(f"{name} must have 1 or 3 channels; got {X.shape[-1]}")
    if n_channels is not None and X.shape[-1] != n_channels:
        raise ValueError(f"{name} has {X.shape[-1]} channels, expected {n_channels}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or inf")
    lo, hi = value_range
    if X.min() < lo or X.max() > hi:
        raise ValueError(f"{name} values must lie in [{lo}, {hi}]")
    return X


def check_labels(y, n_samples, name="y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-d")
    if len(y) != n_samples:
        raise ValueError(f"{name} has {len(y)} entries for {n_samples} samples")
    return y


def check_same_geometry(A, B, names=("X", "X_target")):
    if A.shape[1:] != B.shape[1:]:
        raise ValueError(f"{names[0]} images {A.shape[1:]} and {names[1]} images {B.shape[1:]} differ in shape")
