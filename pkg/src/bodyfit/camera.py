"""Weak-perspective projection."""

from dataclasses import dataclass

import numpy as np

from ._validation import as_float_array, as_points
from .exceptions import NonPositiveScale

CROP_SIZE = 224


@dataclass(frozen=True)
class WeakPerspectiveCamera:
    s: float
    t: tuple

    def __post_init__(self):
        s = float(self.s)
        t = tuple(float(x) for x in np.asarray(self.t, dtype=np.float64).reshape(2))
        if not np.isfinite(s) or not all(np.isfinite(t)):
            raise NonPositiveScale("camera parameters must be finite")
        if s <= 0:
            raise NonPositiveScale(f"camera scale must be positive, got {s}")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "t", t)

    def to_dict(self):
        return {"s": self.s, "t": list(self.t)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["s"], d["t"])


def project(points, cam):
    """Drop depth, then scale and translate: ``s * (x, y) + t``."""
    points = as_points(points)
    return cam.s * points[:, :2] + np.asarray(cam.t)


def project_backward(points, cam, grad):
    """Gradients of a scalar w.r.t. (points, s, t) given dL/dprojection."""
    points = as_points(points)
    grad = as_float_array(grad, "grad", shape=(points.shape[0], 2))
    g_points = np.zeros_like(points)
    g_points[:, :2] = cam.s * grad
    g_s = float(np.sum(grad * points[:, :2]))
    g_t = grad.sum(axis=0)
    return g_points, g_s, g_t
