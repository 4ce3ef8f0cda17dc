"""Input validation helpers shared by the numeric modules."""

import numpy as np

from .exceptions import DimensionMismatch, ValidationError


def as_float_array(x, name="array", ndim=None, shape=None, finite=True):
    """Convert to a float64 array and check rank/shape.

    ``shape`` may contain ``None`` wildcards, e.g. ``(None, 3)``.
    """
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionMismatch(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if shape is not None:
        if arr.ndim != len(shape):
            raise DimensionMismatch(f"{name}: expected shape {shape}, got {arr.shape}")
        for want, got in zip(shape, arr.shape):
            if want is not None and want != got:
                raise DimensionMismatch(f"{name}: expected shape {shape}, got {arr.shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains non-finite values")
    return arr


def as_points(x, dim=3, name="points"):
    return as_float_array(x, name=name, shape=(None, dim))


def as_visibility(vis, n, name="visibility"):
    if vis is None:
        return np.ones(n, dtype=bool)
    vis = np.asarray(vis).astype(bool).reshape(-1)
    if vis.shape[0] != n:
        raise DimensionMismatch(f"{name}: expected {n} entries, got {vis.shape[0]}")
    return vis


def check_same_shape(a, b, names=("a", "b"), exc=DimensionMismatch):
    if a.shape != b.shape:
        raise exc(f"{names[0]} has shape {a.shape} but {names[1]} has shape {b.shape}")
