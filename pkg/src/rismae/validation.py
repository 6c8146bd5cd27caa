"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_iq(X, frame_length: int | None = None, dtype=np.float32) -> np.ndarray:
    """Validate a batch of IQ frames and return it as (n, 2, T).

    Accepts (n, 2, T) real arrays, (n, T) complex arrays, or (n, 2*T)
    flattened rows laid out as [I..., Q...].
    """
    X = np.asarray(X)
    if np.iscomplexobj(X):
        if X.ndim != 2:
            raise ValueError(f"complex input must be (n, T), got shape {X.shape}")
        X = np.stack([X.real, X.imag], axis=1)
    elif X.ndim == 2:
        if X.shape[1] % 2:
            raise ValueError("flattened IQ rows must have even length [I..., Q...]")
        X = X.reshape(X.shape[0], 2, X.shape[1] // 2)
    X = check_array(X, dtype=dtype, allow_nd=True, ensure_min_samples=1)
    if X.ndim != 3 or X.shape[1] != 2:
        raise ValueError(f"IQ frames must have shape (n, 2, T), got {X.shape}")
    if frame_length is not None and X.shape[2] != frame_length:
        raise ValueError(f"expected frames of length {frame_length}, got {X.shape[2]}")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"y must be a 1-D array with {n} entries")
    return y
