"""Analytic initialization from 3D keypoints.

The global orientation comes from a least-squares rigid fit of the
template's rest palm points (wrist + five finger bases) to the observed
ones.  Finger rotations are then recovered bone by bone, root to tip,
as pure swings: the twist about each bone axis is not observable from
keypoints and is set to zero.
"""
from __future__ import annotations

import numpy as np

from .kinematics import HANDS, TwoHandParams
from .rotations import axis_angle_from_matrix, rodrigues, swing
from .template import N_SHAPE, PALM_KEYPOINTS, HandTemplate


class DegenerateError(ValueError):
    """Keypoints do not determine the requested rotation."""


def _child(b):
    f, j = divmod(b - 1, 3)
    return b + 1 if j < 2 else 16 + f


def kabsch(src, dst):
    """Rotation R minimizing sum |R src_i + t - dst_i|^2 (det R = +1)."""
    a = src - src.mean(0)
    b = dst - dst.mean(0)
    U, S, Vt = np.linalg.svd(b.T @ a)
    d = np.sign(np.linalg.det(U @ Vt))
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def _check_spread(points, what):
    c = points - points.mean(0)
    sv = np.linalg.svd(c, compute_uv=False)
    scale = max(sv[0], 1e-300)
    if sv[0] < 1e-9 or sv[1] < 1e-9 * scale:
        raise DegenerateError(f"{what} are coincident or collinear")


def orientation_from_joints(joints_3d, template: HandTemplate, hand="right", shape=None):
    """Axis-angle root orientation of one hand from its 21 keypoints."""
    j = np.asarray(joints_3d, dtype=np.float64)
    if j.shape != (21, 3):
        raise ValueError(f"expected (21, 3) keypoints, got {j.shape}")
    obs = j[PALM_KEYPOINTS]
    if not np.all(np.isfinite(obs)):
        raise DegenerateError("palm keypoints missing (non-finite)")
    _check_spread(obs, "palm keypoints")
    rest = template.rest_keypoints(hand, shape)[PALM_KEYPOINTS]
    return axis_angle_from_matrix(kabsch(rest, obs))


def swing_from_joints(joints_3d, orientation, template: HandTemplate, hand="right", shape=None):
    """(15, 3) twist-free finger rotations reproducing the observed bone directions."""
    j = np.asarray(joints_3d, dtype=np.float64)
    if j.shape != (21, 3):
        raise ValueError(f"expected (21, 3) keypoints, got {j.shape}")
    rest = template.rest_keypoints(hand, shape)
    R_root = rodrigues(orientation)
    pose = np.zeros((15, 3))
    A = [np.eye(3)] * 16
    for b in range(1, 16):
        p = 0 if (b - 1) % 3 == 0 else b - 1
        c = _child(b)
        o = R_root.T @ (j[c] - j[b])
        u = rest[c] - rest[b]
        if np.linalg.norm(o) < 1e-12:
            raise DegenerateError(f"observed bone {b} -> {c} has zero length")
        r = swing(u, A[p].T @ o)
        pose[b - 1] = r
        A[b] = A[p] @ rodrigues(r)
    return pose


def params_from_joints(joints_3d, template: HandTemplate, shapes=None) -> TwoHandParams:
    """Full two-hand initialization from 42 keypoints (left then right)."""
    j = np.asarray(joints_3d, dtype=np.float64).reshape(42, 3)
    shapes = shapes if shapes is not None else (np.zeros(N_SHAPE), np.zeros(N_SHAPE))
    kw = {}
    for i, hand in enumerate(HANDS):
        jh = j[21 * i:21 * (i + 1)]
        phi = orientation_from_joints(jh, template, hand, shapes[i])
        kw[f"{hand}_orient"] = phi
        kw[f"{hand}_fingers"] = swing_from_joints(jh, phi, template, hand, shapes[i])
        kw[f"{hand}_shape"] = shapes[i]
    # right wrist sits at the origin; the left wrist at the translation
    rest_wrist = template.rest_keypoints("left", shapes[0])[0]
    kw["translation"] = j[0] - rodrigues(kw["left_orient"]) @ rest_wrist - (
        j[21] - rodrigues(kw["right_orient"]) @ template.rest_keypoints("right", shapes[1])[0])
    return TwoHandParams(**kw)
