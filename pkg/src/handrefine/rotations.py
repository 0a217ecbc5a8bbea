"""Axis-angle utilities shared by the kinematics, IK and objective code.

Numpy versions serve the public API and the IK; the torch version is
what the optimizer differentiates through.
"""
import math

import numpy as np
import torch

# below this squared angle the Taylor branch is used
_SMALL_SQ = 1e-12


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def rodrigues(axis_angle):
    """Axis-angle 3-vector -> 3x3 rotation matrix.

    The angle is the vector norm; the zero vector maps to the identity.
    """
    v = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError("axis-angle must be finite")
    sq = float(v @ v)
    K = skew(v)
    if sq < _SMALL_SQ:
        a = 1.0 - sq / 6.0
        b = 0.5 - sq / 24.0
    else:
        th = math.sqrt(sq)
        a = math.sin(th) / th
        b = (1.0 - math.cos(th)) / sq
    return np.eye(3) + a * K + b * (K @ K)


def axis_angle_from_matrix(R):
    """Inverse of :func:`rodrigues`; returned angle lies in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin = 0.5 * np.linalg.norm(w)
    th = math.atan2(sin, cos)
    if th < 1e-6:
        # first order: R - R^T ~ 2 [v]x
        return 0.5 * w
    if math.pi - th > 1e-4:
        return w * (th / (2.0 * math.sin(th)))
    # near pi the antisymmetric part vanishes; read the axis off R + I
    S = 0.5 * (R + np.eye(3))
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / math.sqrt(max(S[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0:
        axis = -axis
    return axis * th


def quaternion_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def compose(a, b):
    """Axis-angle of rodrigues(a) @ rodrigues(b)."""
    return axis_angle_from_matrix(rodrigues(a) @ rodrigues(b))


def swing(u, v):
    """Twist-free rotation (axis-angle) taking direction u onto direction v."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u = u / np.linalg.norm(u)
    v = v / np.linalg.norm(v)
    c = float(np.clip(u @ v, -1.0, 1.0))
    axis = np.cross(u, v)
    s = np.linalg.norm(axis)
    if s < 1e-15:
        if c > 0:
            return np.zeros(3)
        # antiparallel: any axis orthogonal to u
        tmp = np.eye(3)[int(np.argmin(np.abs(u)))]
        axis = np.cross(u, tmp)
        return axis / np.linalg.norm(axis) * math.pi
    return axis / s * math.atan2(s, c)


def rodrigues_torch(v):
    """Batched differentiable Rodrigues: (..., 3) -> (..., 3, 3).

    Uses a Taylor branch near zero so gradients stay finite at the
    identity (rest pose is exactly zero).
    """
    sq = (v * v).sum(-1, keepdim=True)
    small = sq < _SMALL_SQ
    safe_sq = torch.where(small, torch.ones_like(sq), sq)
    th = torch.sqrt(safe_sq)
    a = torch.where(small, 1.0 - sq / 6.0, torch.sin(th) / th)
    b = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(th)) / safe_sq)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = torch.zeros_like(x)
    K = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1)
    K = K.reshape(v.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=v.dtype).expand_as(K)
    return eye + a[..., None] * K + b[..., None] * (K @ K)
