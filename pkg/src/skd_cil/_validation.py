"""Input checks shared by the estimator API."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.utils.validation import check_array, column_or_1d


def check_images(X, input_shape: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Coerce ``X`` to a float32 (n, C, H, W) tensor.

    Accepts (n, C, H, W), (n, H, W) (single channel), or flat (n, C*H*W) when
    ``input_shape`` is known.
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim == 3:
        X = X[:, None]
    elif X.ndim == 2:
        if input_shape is None:
            raise ValueError("flat input needs a known input_shape")
        if X.shape[1] != int(np.prod(input_shape)):
            raise ValueError(f"expected {int(np.prod(input_shape))} features, got {X.shape[1]}")
        X = X.reshape(X.shape[0], *input_shape)
    elif X.ndim != 4:
        raise ValueError(f"expected image batch with 2 to 4 dims, got {X.ndim}")
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise ValueError(f"expected images of shape {tuple(input_shape)}, got {tuple(X.shape[1:])}")
    return torch.from_numpy(np.ascontiguousarray(X))


def check_labels(y, n_samples: int) -> np.ndarray:
    y = column_or_1d(y, warn=True)
    if y.shape[0] != n_samples:
        raise ValueError(f"{n_samples} samples but {y.shape[0]} labels")
    return y
