"""Axis-angle / matrix / quaternion conversions and the Rodrigues Jacobian."""

from __future__ import annotations

import numpy as np

__all__ = [
    "axis_angle_to_matrix",
    "matrix_to_axis_angle",
    "axis_angle_to_quat",
    "quat_to_axis_angle",
    "quat_mean_hemispherized",
    "rotation_jacobian",
    "geodesic_angle",
]

_SMALL = 1e-8


def _hat(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def axis_angle_to_matrix(aa):
    """Rodrigues formula; accepts (3,) or (N, 3), returns matching matrices."""
    aa = np.asarray(aa, dtype=np.float64)
    single = aa.ndim == 1
    aa = np.atleast_2d(aa)
    theta = np.linalg.norm(aa, axis=1)
    out = np.empty((len(aa), 3, 3))
    for i, (v, t) in enumerate(zip(aa, theta)):
        if t < _SMALL:
            k = _hat(v)
            out[i] = np.eye(3) + k + 0.5 * (k @ k)
        else:
            k = _hat(v / t)
            out[i] = np.eye(3) + np.sin(t) * k + (1.0 - np.cos(t)) * (k @ k)
    return out[0] if single else out


def matrix_to_axis_angle(rot):
    """Inverse Rodrigues; the returned angle lies in [0, pi]."""
    rot = np.asarray(rot, dtype=np.float64)
    cos_t = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < _SMALL:
        w = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # Near pi the skew part vanishes; recover the axis from R + I.
        m = (rot + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diagonal(m), 0.0))
        k = int(np.argmax(axis))
        axis = m[:, k] / max(axis[k], _SMALL)
        axis /= np.linalg.norm(axis)
        return axis * theta
    w = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    return theta / (2.0 * np.sin(theta)) * w


def axis_angle_to_quat(aa):
    """Unit quaternion (w, x, y, z)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa)
    if theta < _SMALL:
        q = np.array([1.0, aa[0] / 2, aa[1] / 2, aa[2] / 2])
        return q / np.linalg.norm(q)
    axis = aa / theta
    return np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * axis])


def quat_to_axis_angle(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    w = np.clip(q[0], -1.0, 1.0)
    theta = 2.0 * np.arccos(w)
    s = np.sqrt(max(1.0 - w * w, 0.0))
    if s < _SMALL:
        return 2.0 * q[1:]
    return q[1:] / s * theta


def quat_mean_hemispherized(quats):
    """Arithmetic quaternion mean after flipping all onto one hemisphere.

    Signs are resolved against the first quaternion; antipodal ties keep the
    first quaternion's hemisphere.
    """
    quats = np.asarray(quats, dtype=np.float64)
    ref = quats[0]
    aligned = np.where((quats @ ref)[:, None] < 0, -quats, quats)
    m = aligned.mean(axis=0)
    n = np.linalg.norm(m)
    if n < _SMALL:
        m = ref
        n = np.linalg.norm(ref)
    return m / n


def rotation_jacobian(aa):
    """d R(aa) / d aa_k for k = 0..2, shape (3, 3, 3) with k first.

    Gallego-Yezzi closed form, with the exact limit dR/daa_k = hat(e_k) at
    the identity.
    """
    aa = np.asarray(aa, dtype=np.float64)
    theta2 = aa @ aa
    rot = axis_angle_to_matrix(aa)
    out = np.empty((3, 3, 3))
    if theta2 < _SMALL ** 2:
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            out[k] = _hat(e)
        return out
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        term = aa[k] * _hat(aa) + _hat(np.cross(aa, (np.eye(3) - rot) @ e))
        out[k] = (term / theta2) @ rot
    return out


def geodesic_angle(r1, r2):
    """Rotation angle (radians) between two rotation matrices."""
    cos_t = np.clip((np.trace(np.asarray(r1).T @ r2) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_t))
