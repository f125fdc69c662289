"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .errors import ContractError

UNIT_TOL = 1e-6


def check_vectors(v, name="vector", unit=False, tol=UNIT_TOL):
    """Return ``v`` as a float64 array of shape (..., 3).

    With ``unit=True`` every vector must have length 1 within ``tol``.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape[-1:] != (3,):
        raise ContractError(f"{name} must have a trailing dimension of 3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    if unit:
        norms = np.linalg.norm(arr, axis=-1)
        if np.any(np.abs(norms - 1.0) > tol):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise ContractError(f"{name} must be unit length (max deviation {worst:.3g})")
    return arr


def check_rgb(x, name="rgb", low=None, high=None):
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1:] != (3,):
        raise ContractError(f"{name} must have a trailing dimension of 3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    if low is not None and np.any(arr < low):
        raise ContractError(f"{name} has values below {low}")
    if high is not None and np.any(arr > high):
        raise ContractError(f"{name} has values above {high}")
    return arr


def check_image(img, name="image", channels=None, nonnegative=False):
    """Validate an (H, W) or (H, W, C) float image."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ContractError(f"{name} must be 2-D or 3-D, got {arr.ndim}-D")
    if channels is not None:
        c = 1 if arr.ndim == 2 else arr.shape[2]
        if c != channels:
            raise ContractError(f"{name} must have {channels} channel(s), got {c}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    if nonnegative and np.any(arr < 0):
        raise ContractError(f"{name} must be non-negative")
    return arr


def check_mask(mask, shape, name="mask", nonempty=True):
    m = np.asarray(mask, dtype=bool)
    if m.shape != tuple(shape):
        raise ContractError(f"{name} shape {m.shape} does not match {tuple(shape)}")
    if nonempty and not m.any():
        raise ContractError(f"{name} is empty")
    return m


def check_same_shape(a, b, names=("predicted", "reference")):
    if np.shape(a) != np.shape(b):
        raise ContractError(
            f"{names[0]} shape {np.shape(a)} does not match {names[1]} shape {np.shape(b)}"
        )


def normalize(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.where(n > 0, n, 1.0)
