"""Small argument-checking helpers shared across modules."""

from __future__ import annotations

import numpy as np


def as_float_array(x, name: str, shape: tuple | None = None, allow_nan: bool = False) -> np.ndarray:
    """Coerce to a float ndarray, optionally enforcing an exact shape."""
    arr = np.asarray(x, dtype=float)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not allow_nan and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_rng(seed) -> np.random.Generator:
    """Accept a seed or an existing Generator and return a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_window(k: int, length: int, total: int, name: str = "window") -> None:
    """Validate that frames k .. k+length fit inside a trace of `total` frames."""
    if length < 1:
        raise ValueError(f"{name} length must be >= 1, got {length}")
    if k < 0 or k + length >= total:
        raise ValueError(
            f"{name} [{k}, {k + length}] out of range for {total} frames"
        )
