"""Input validation helpers shared across the package."""

from __future__ import annotations

import numbers

import numpy as np


class UsageError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class ConfigError(UsageError):
    """Raised for malformed or inconsistent experiment configuration."""


def check_points(x, dim: int, *, finite: bool = True) -> tuple[np.ndarray, bool]:
    """Coerce ``x`` to a float array of shape ``(n, dim)``.

    Returns the 2-D array and a flag telling whether the input was a single
    point, so callers can squeeze their output back.
    """
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise UsageError(f"expected points of dimension {dim}, got array of shape {np.shape(x)}")
    if finite and not np.all(np.isfinite(arr)):
        raise UsageError("points must be finite")
    return arr, single


def check_time(t, *, name: str = "t", strict: bool = False) -> float:
    if not isinstance(t, numbers.Real) or not np.isfinite(t):
        raise UsageError(f"{name} must be a finite real number, got {t!r}")
    t = float(t)
    if t < 0 or (strict and t == 0):
        bound = "> 0" if strict else ">= 0"
        raise UsageError(f"{name} must be {bound}, got {t}")
    return t


def check_positive(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise UsageError(f"{name} must be a positive real number, got {value!r}")
    return float(value)


def check_count(n, name: str = "n", minimum: int = 1) -> int:
    if isinstance(n, bool) or not isinstance(n, numbers.Integral) or n < minimum:
        raise UsageError(f"{name} must be an integer >= {minimum}, got {n!r}")
    return int(n)


def check_spd(cov, name: str = "covariance", tol: float = 1e-10) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise UsageError(f"{name} must be a square matrix, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-12):
        raise UsageError(f"{name} must be symmetric")
    cov = 0.5 * (cov + cov.T)
    if np.linalg.eigvalsh(cov)[0] <= tol:
        raise UsageError(f"{name} must be positive definite (min eigenvalue > {tol})")
    return cov
