"""Rotation conversions: 6D, Euler, axis-angle and 3x3 matrices.

All functions broadcast over leading dimensions. The canonical internal form
is the rotation matrix; kinematics only ever composes matrices.

Conventions
-----------
* 6D: the first two matrix columns, concatenated ``[c0, c1]``. Decoding
  normalizes ``c0``, orthogonalizes ``c1`` against it and completes the frame
  with a cross product.
* Euler: ``(pitch, roll, yaw)`` in radians with ``R = Rz(yaw) @ Ry(roll) @ Rx(pitch)``.
"""

import numpy as np

from .exceptions import DegenerateInput, InvalidRotation

GRAM_SCHMIDT_TOL = 1e-12
ORTHO_TOL = 1e-9

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def _cross(a, b):
    # explicit components keep results independent of batch layout
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _gram_schmidt(r):
    a1 = r[..., :3]
    a2 = r[..., 3:]
    n1 = np.sqrt(_dot(a1, a1))
    if np.any(~(n1 >= GRAM_SCHMIDT_TOL)):
        raise DegenerateInput("6D rotation: first column has (near) zero norm")
    b1 = a1 / n1[..., None]
    proj = _dot(b1, a2)
    u = a2 - proj[..., None] * b1
    nu = np.sqrt(_dot(u, u))
    if np.any(~(nu >= GRAM_SCHMIDT_TOL)):
        raise DegenerateInput("6D rotation: second column is parallel to the first")
    b2 = u / nu[..., None]
    return a1, a2, n1, b1, proj, u, nu, b2


def rot6d_to_matrix(r):
    """Decode 6D rotations of shape (..., 6) into matrices of shape (..., 3, 3)."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise DegenerateInput(f"6D rotation must have trailing size 6, got {r.shape}")
    _, _, _, b1, _, _, _, b2 = _gram_schmidt(r)
    b3 = _cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_to_matrix_backward(r, grad_R):
    """Vector-Jacobian product of :func:`rot6d_to_matrix`.

    Returns dL/dr given dL/dR with the same leading shape.
    """
    r = np.asarray(r, dtype=np.float64)
    grad_R = np.asarray(grad_R, dtype=np.float64)
    a1, a2, n1, b1, proj, u, nu, b2 = _gram_schmidt(r)
    g1 = grad_R[..., :, 0].copy()
    g2 = grad_R[..., :, 1].copy()
    g3 = grad_R[..., :, 2]
    # b3 = b1 x b2
    g1 += _cross(b2, g3)
    g2 += _cross(g3, b1)
    # b2 = u / |u|
    gu = (g2 - b2 * _dot(b2, g2)[..., None]) / nu[..., None]
    # u = a2 - (b1 . a2) b1
    ga2 = gu - b1 * _dot(b1, gu)[..., None]
    g1 = g1 - proj[..., None] * gu - _dot(b1, gu)[..., None] * a2
    # b1 = a1 / |a1|
    ga1 = (g1 - b1 * _dot(b1, g1)[..., None]) / n1[..., None]
    return np.concatenate([ga1, ga2], axis=-1)


def is_rotation(R, tol=ORTHO_TOL):
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3) or not np.all(np.isfinite(R)):
        return False
    eye = np.eye(3)
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max() <= tol
    det = np.abs(np.linalg.det(R) - 1.0).max() <= tol
    return bool(ortho and det)


def check_rotation(R, tol=ORTHO_TOL, name="rotation"):
    if not is_rotation(R, tol):
        raise InvalidRotation(f"{name} is not a proper rotation matrix (tol {tol})")
    return np.asarray(R, dtype=np.float64)


def matrix_to_rot6d(R):
    """First two columns of R, shape (..., 6)."""
    R = check_rotation(R)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def _axis_mats(angle):
    c, s = np.cos(angle), np.sin(angle)
    one, zero = np.ones_like(angle), np.zeros_like(angle)
    Rx = np.stack([one, zero, zero, zero, c, -s, zero, s, c], -1).reshape(angle.shape + (3, 3))
    Ry = np.stack([c, zero, s, zero, one, zero, -s, zero, c], -1).reshape(angle.shape + (3, 3))
    Rz = np.stack([c, -s, zero, s, c, zero, zero, zero, one], -1).reshape(angle.shape + (3, 3))
    return Rx, Ry, Rz


def _axis_mat_derivs(angle):
    c, s = np.cos(angle), np.sin(angle)
    zero = np.zeros_like(angle)
    dRx = np.stack([zero, zero, zero, zero, -s, -c, zero, c, -s], -1).reshape(angle.shape + (3, 3))
    dRy = np.stack([-s, zero, c, zero, zero, zero, -c, zero, -s], -1).reshape(angle.shape + (3, 3))
    dRz = np.stack([-s, -c, zero, c, -s, zero, zero, zero, zero], -1).reshape(angle.shape + (3, 3))
    return dRx, dRy, dRz


def euler_to_matrix(e):
    """(pitch, roll, yaw) -> Rz(yaw) @ Ry(roll) @ Rx(pitch)."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != 3 or not np.all(np.isfinite(e)):
        raise InvalidRotation("Euler angles must be finite with trailing size 3")
    Rx, _, _ = _axis_mats(e[..., 0])
    _, Ry, _ = _axis_mats(e[..., 1])
    _, _, Rz = _axis_mats(e[..., 2])
    return Rz @ Ry @ Rx


def euler_to_matrix_backward(e, grad_R):
    e = np.asarray(e, dtype=np.float64)
    Rx, _, _ = _axis_mats(e[..., 0])
    _, Ry, _ = _axis_mats(e[..., 1])
    _, _, Rz = _axis_mats(e[..., 2])
    dRx, _, _ = _axis_mat_derivs(e[..., 0])
    _, dRy, _ = _axis_mat_derivs(e[..., 1])
    _, _, dRz = _axis_mat_derivs(e[..., 2])
    parts = [Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx]
    return np.stack([np.sum(p * grad_R, axis=(-2, -1)) for p in parts], axis=-1)


def matrix_to_euler(R):
    """Inverse of :func:`euler_to_matrix` with roll in [-pi/2, pi/2]."""
    R = np.asarray(R, dtype=np.float64)
    pitch = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    roll = np.arcsin(np.clip(-R[..., 2, 0], -1.0, 1.0))
    yaw = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    return np.stack([pitch, roll, yaw], axis=-1)


def yaw_from_matrix(R):
    R = np.asarray(R, dtype=np.float64)
    return np.arctan2(R[..., 1, 0], R[..., 0, 0])


def yaw_from_matrix_backward(R, grad_yaw):
    """dL/dR for ``yaw = atan2(R10, R00)``."""
    R = np.asarray(R, dtype=np.float64)
    r00, r10 = R[..., 0, 0], R[..., 1, 0]
    den = r00 * r00 + r10 * r10
    g = np.zeros(R.shape)
    g[..., 0, 0] = -r10 / den * grad_yaw
    g[..., 1, 0] = r00 / den * grad_yaw
    return g


def axis_angle_to_matrix(a):
    """Rodrigues formula; the zero vector maps to the identity exactly."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != 3 or not np.all(np.isfinite(a)):
        raise InvalidRotation("axis-angle must be finite with trailing size 3")
    theta = np.sqrt(_dot(a, a))
    small = theta < 1e-300
    safe = np.where(small, 1.0, theta)
    k = a / safe[..., None]
    zero = np.zeros_like(theta)
    K = np.stack(
        [zero, -k[..., 2], k[..., 1], k[..., 2], zero, -k[..., 0], -k[..., 1], k[..., 0], zero], -1
    ).reshape(a.shape[:-1] + (3, 3))
    s = np.where(small, 0.0, np.sin(theta))[..., None, None]
    c = np.where(small, 0.0, 1.0 - np.cos(theta))[..., None, None]
    return np.eye(3) + s * K + c * (K @ K)


def axis_angle_to_rot6d(a):
    return matrix_to_rot6d(axis_angle_to_matrix(a))


def random_rotations(rng, n):
    """Uniformly distributed rotations from normalized Gaussian quaternions."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.empty((n, 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - z * w)
    R[:, 0, 2] = 2 * (x * z + y * w)
    R[:, 1, 0] = 2 * (x * y + z * w)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - x * w)
    R[:, 2, 0] = 2 * (x * z - y * w)
    R[:, 2, 1] = 2 * (y * z + x * w)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R
