"""Rotation, quaternion and dual-quaternion helpers.

Quaternions are stored as ``(w, x, y, z)``. Dual quaternions are 8-vectors
``(real[4], dual[4])``.
"""
from __future__ import annotations

import numpy as np


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def hat_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation by ``angle`` about the unit ``axis``."""
    K = hat(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rodrigues(r: np.ndarray) -> np.ndarray:
    """Rotation matrix of a rotation vector (axis * angle)."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        return np.eye(3) + hat(r)
    return axis_angle_matrix(r / theta, theta)


def right_jacobian(r: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): ``exp(r + d) ~= exp(r) exp(J_r(r) d)``."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r)
    K = hat(r)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    return (np.eye(3) - (1.0 - np.cos(theta)) / t2 * K
            + (theta - np.sin(theta)) / (t2 * theta) * (K @ K))


def rodrigues_batch(r: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) of rotation vectors (..., 3)."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    small = theta < 1e-12
    K = hat_batch(r / np.where(small, 1.0, theta)[..., None])
    out = (np.eye(3) + np.sin(theta)[..., None, None] * K
           + (1.0 - np.cos(theta))[..., None, None] * (K @ K))
    if np.any(small):
        out[small] = np.eye(3) + hat_batch(r[small])
    return out


def right_jacobian_batch(r: np.ndarray) -> np.ndarray:
    """Right Jacobians (..., 3, 3) of rotation vectors (..., 3)."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    K = hat_batch(r)
    KK = K @ K
    small = theta < 1e-6
    t = np.where(small, 1.0, theta)
    a = np.where(small, 0.5, (1.0 - np.cos(t)) / t ** 2)
    b = np.where(small, 1.0 / 6.0, (t - np.sin(t)) / t ** 3)
    return np.eye(3) - a[..., None, None] * K + b[..., None, None] * KK


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation vector with angle in [0, pi]."""
    return quat_to_rotvec(matrix_to_quat(R))


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    # Shepperd's method, branch on the largest diagonal term
    tr = np.trace(R)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotvec_to_quat(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        return np.array([1.0, 0.5 * r[0], 0.5 * r[1], 0.5 * r[2]]) / np.sqrt(1 + 0.25 * theta * theta)
    axis = r / theta
    return np.concatenate([[np.cos(0.5 * theta)], np.sin(0.5 * theta) * axis])


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    s = np.linalg.norm(q[1:])
    if s < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(s, q[0])
    return angle * q[1:] / s


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    """Shortest-arc spherical interpolation; ``t=0`` gives ``q0``."""
    q0 = q0 / np.linalg.norm(q0)
    q1 = q1 / np.linalg.norm(q1)
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1, d = -q1, -d
    if d > 0.9995:
        q = (1.0 - t) * q0 + t * q1
        return q / np.linalg.norm(q)
    omega = np.arccos(min(d, 1.0))
    s = np.sin(omega)
    return (np.sin((1.0 - t) * omega) * q0 + np.sin(t * omega) * q1) / s


def dual_quat_from_rt(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Unit dual quaternion of ``x -> R x + t``."""
    qr = matrix_to_quat(R)
    qd = 0.5 * quat_mul(np.concatenate([[0.0], t]), qr)
    return np.concatenate([qr, qd])


def dual_quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ar, ad = a[..., :4], a[..., 4:]
    br, bd = b[..., :4], b[..., 4:]
    return np.concatenate([quat_mul(ar, br), quat_mul(ar, bd) + quat_mul(ad, br)], axis=-1)


def dual_quat_apply(dq: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Transform points ``p`` (..., 3) by (possibly unnormalized) dual quaternions.

    The result is invariant to a positive rescaling of ``dq``; that is what
    makes blended-then-applied skinning well defined.
    """
    w0 = dq[..., 0]
    r0 = dq[..., 1:4]
    we = dq[..., 4]
    re = dq[..., 5:8]
    n2 = w0 * w0 + np.einsum("...i,...i->...", r0, r0)
    rv = np.einsum("...i,...i->...", r0, p)
    rot = ((w0 * w0 - np.einsum("...i,...i->...", r0, r0))[..., None] * p
           + 2.0 * rv[..., None] * r0 + 2.0 * w0[..., None] * np.cross(r0, p))
    trans = 2.0 * (w0[..., None] * re - we[..., None] * r0 + np.cross(r0, re))
    return (rot + trans) / n2[..., None]


def dual_quat_apply_jacobian(dq: np.ndarray, p: np.ndarray) -> np.ndarray:
    """d dual_quat_apply(dq, p) / d dq, shape (..., 3, 8)."""
    w0 = dq[..., 0]
    r0 = dq[..., 1:4]
    we = dq[..., 4]
    re = dq[..., 5:8]
    n2 = w0 * w0 + np.einsum("...i,...i->...", r0, r0)
    rv = np.einsum("...i,...i->...", r0, p)
    rr = np.einsum("...i,...i->...", r0, r0)
    N = ((w0 * w0 - rr)[..., None] * p + 2.0 * rv[..., None] * r0
         + 2.0 * w0[..., None] * np.cross(r0, p)
         + 2.0 * (w0[..., None] * re - we[..., None] * r0 + np.cross(r0, re)))
    x = N / n2[..., None]

    shape = dq.shape[:-1]
    eye = np.broadcast_to(np.eye(3), shape + (3, 3))
    dN = np.zeros(shape + (3, 8))
    dN[..., :, 0] = 2.0 * w0[..., None] * p + 2.0 * np.cross(r0, p) + 2.0 * re
    dN[..., :, 1:4] = (-2.0 * p[..., :, None] * r0[..., None, :]
                       + 2.0 * r0[..., :, None] * p[..., None, :]
                       + 2.0 * rv[..., None, None] * eye
                       - 2.0 * w0[..., None, None] * hat_batch(p)
                       - 2.0 * we[..., None, None] * eye
                       - 2.0 * hat_batch(re))
    dN[..., :, 4] = -2.0 * r0
    dN[..., :, 5:8] = 2.0 * w0[..., None, None] * eye + 2.0 * hat_batch(r0)

    dn2 = np.zeros(shape + (8,))
    dn2[..., 0] = 2.0 * w0
    dn2[..., 1:4] = 2.0 * r0
    return (dN - x[..., :, None] * dn2[..., None, :]) / n2[..., None, None]
