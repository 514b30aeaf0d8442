"""Input validation helpers shared by the estimators and functional API."""

import numbers

import numpy as np

from .exceptions import DegenerateInputError, InvalidArgumentError


def check_observation(V, *, min_rows=2, min_cols=2, name="V"):
    """Return ``V`` as a finite 2-D float array or raise InvalidArgumentError."""
    V = np.asarray(V, dtype=float)
    if V.ndim != 2:
        raise InvalidArgumentError(f"{name} must be 2-D, got shape {V.shape}")
    n, m = V.shape
    if n < min_rows or m < min_cols:
        raise InvalidArgumentError(
            f"{name} must have at least {min_rows} rows and {min_cols} columns, got {V.shape}"
        )
    if not np.all(np.isfinite(V)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return V


def check_nonzero(V, name="V"):
    norm = np.linalg.norm(V)
    if norm == 0.0:
        raise DegenerateInputError(f"{name} is identically zero")
    return norm


def check_n_sources(n_sensors, n_sources):
    if not isinstance(n_sources, numbers.Integral) or n_sources < 1:
        raise InvalidArgumentError(f"number of sources must be a positive integer, got {n_sources!r}")
    if n_sources >= n_sensors:
        raise InvalidArgumentError(
            f"number of sensors ({n_sensors}) has to be greater than the number of sources ({n_sources})"
        )


def check_factors(W, H, tau):
    W = np.asarray(W, dtype=float)
    H = np.asarray(H, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if W.ndim != 2 or H.ndim != 2 or tau.ndim != 2:
        raise InvalidArgumentError("W, H and tau must all be 2-D")
    n, k = W.shape
    if H.shape[0] != k or tau.shape != (n, k):
        raise InvalidArgumentError(
            f"inconsistent shapes: W {W.shape}, H {H.shape}, tau {tau.shape}"
        )
    if not np.all(np.isfinite(tau)):
        raise InvalidArgumentError("tau contains non-finite entries")
    return W, H, tau


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
