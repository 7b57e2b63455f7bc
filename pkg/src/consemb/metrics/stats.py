"""Bootstrap intervals and correlation."""
from __future__ import annotations

import math
import warnings

import numpy as np

from ..errors import DegenerateInputWarning, InvalidInputError


def bootstrap_ci(values, n_resamples: int = 1000, level: float = 0.95, seed: int = 0) -> dict:
    """Percentile interval of resampled means.

    The interval is widened if needed so that it always contains the sample
    mean, which can fall outside it for very skewed or tiny samples.
    """
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise InvalidInputError("bootstrap needs a nonempty 1-D sample")
    if not 0 < level < 1:
        raise InvalidInputError(f"level must be in (0, 1), got {level}")
    if n_resamples < 1:
        raise InvalidInputError(f"n_resamples must be positive, got {n_resamples}")
    if not np.isfinite(x).all():
        raise InvalidInputError("bootstrap sample contains non-finite values")
    point = float(x.mean())
    if np.all(x == x[0]):
        return {"low": float(x[0]), "high": float(x[0])}
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(n_resamples, x.size))].mean(axis=1)
    tail = (1 - level) / 2 * 100
    low, high = np.percentile(means, [tail, 100 - tail])
    return {"low": float(min(low, point)), "high": float(max(high, point))}


def pearson_r(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError(f"pearson_r needs equal-length 1-D inputs, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise InvalidInputError("pearson_r needs at least two points")
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0:
        warnings.warn("zero variance; correlation undefined", DegenerateInputWarning, stacklevel=2)
        return float("nan")
    return float(np.clip(da @ db / denom, -1.0, 1.0))
