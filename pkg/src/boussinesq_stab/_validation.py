"""Small input-validation helpers shared across modules."""

from __future__ import annotations

import numbers

import numpy as np


def check_positive(value, name: str, *, strict: bool = True) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if strict and value <= 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    if not strict and value < 0:
        raise ValueError(f"{name} must be non-negative, got {value!r}")
    return float(value)


def check_int(value, name: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_vector(x, size: int, name: str, *, dtype=float) -> np.ndarray:
    """Return ``x`` as a finite 1-d array of the given length."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 1 or arr.shape[0] != size:
        raise ValueError(f"{name} must have shape ({size},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_besov_indices(q: float, p: float, d: int = 2) -> None:
    """Validate the integrability/interpolation pair ``q > d, 1 < p < 2q/(2q-1)``."""
    if not q > d:
        raise ValueError(f"q must exceed the dimension {d}, got q={q}")
    upper = 2 * q / (2 * q - 1)
    if not 1 < p < upper:
        raise ValueError(f"p must satisfy 1 < p < {upper:.6g} for q={q}, got p={p}")
