"""Two-hand forward kinematics: shape blend, axis-angle FK, linear blend skinning.

``forward`` is the numpy-facing entry point.  ``forward_torch`` is the
same computation on float64 tensors and is what the optimizer
differentiates.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .rotations import rodrigues_torch
from .template import HandTemplate, N_SHAPE

FACTORS = ("tau", "phi", "theta", "beta")
FACTOR_SIZES = {"tau": 3, "phi": 6, "theta": 90, "beta": 20}
HANDS = ("left", "right")

# bones grouped by depth in the kinematic tree (all finger joints at a level)
_LEVELS = [np.array([1 + 3 * f + j for f in range(5)]) for j in range(3)]


@dataclass(frozen=True, eq=False)
class TwoHandParams:
    """Full parameter set: shapes, orientations, finger poses, right-to-left translation."""
    left_shape: np.ndarray = field(default_factory=lambda: np.zeros(N_SHAPE))
    right_shape: np.ndarray = field(default_factory=lambda: np.zeros(N_SHAPE))
    left_orient: np.ndarray = field(default_factory=lambda: np.zeros(3))
    right_orient: np.ndarray = field(default_factory=lambda: np.zeros(3))
    left_fingers: np.ndarray = field(default_factory=lambda: np.zeros((15, 3)))
    right_fingers: np.ndarray = field(default_factory=lambda: np.zeros((15, 3)))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    _SHAPES = {"left_shape": (N_SHAPE,), "right_shape": (N_SHAPE,), "left_orient": (3,),
               "right_orient": (3,), "left_fingers": (15, 3), "right_fingers": (15, 3),
               "translation": (3,)}

    def __post_init__(self):
        for name, shape in self._SHAPES.items():
            a = np.array(getattr(self, name), dtype=np.float64)
            if a.size != int(np.prod(shape)):
                raise ValueError(f"{name}: expected {int(np.prod(shape))} values, got {a.size}")
            a = a.reshape(shape)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name}: non-finite values")
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    def factor(self, name):
        """Flat vector of one factor (tau, phi, theta, beta); left hand first."""
        if name == "tau":
            return self.translation.copy()
        if name == "phi":
            return np.concatenate([self.left_orient, self.right_orient])
        if name == "theta":
            return np.concatenate([self.left_fingers.ravel(), self.right_fingers.ravel()])
        if name == "beta":
            return np.concatenate([self.left_shape, self.right_shape])
        raise KeyError(f"unknown factor {name!r}")

    def with_factor(self, name, values):
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size != FACTOR_SIZES.get(name, -1):
            raise ValueError(f"factor {name!r} needs {FACTOR_SIZES.get(name)} values, got {v.size}")
        if name == "tau":
            return replace(self, translation=v)
        if name == "phi":
            return replace(self, left_orient=v[:3], right_orient=v[3:])
        if name == "theta":
            return replace(self, left_fingers=v[:45], right_fingers=v[45:])
        return replace(self, left_shape=v[:N_SHAPE], right_shape=v[N_SHAPE:])

    def to_vector(self):
        return np.concatenate([self.factor(f) for f in FACTORS])

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.size != sum(FACTOR_SIZES.values()):
            raise ValueError(f"parameter vector must have {sum(FACTOR_SIZES.values())} entries")
        p, i = cls(), 0
        for f in FACTORS:
            p = p.with_factor(f, vec[i:i + FACTOR_SIZES[f]])
            i += FACTOR_SIZES[f]
        return p

    def hand(self, hand):
        """(shape, orient, fingers) of one hand."""
        if hand == "left":
            return self.left_shape, self.left_orient, self.left_fingers
        return self.right_shape, self.right_orient, self.right_fingers

    def __eq__(self, other):
        return isinstance(other, TwoHandParams) and np.array_equal(self.to_vector(), other.to_vector())


@dataclass(frozen=True, eq=False)
class TwoHandMesh:
    left_vertices: np.ndarray
    right_vertices: np.ndarray
    faces: np.ndarray
    joints_3d: np.ndarray              # (42, 3): left 21 then right 21
    # hand frames (rotation, origin) and hand-frame vertices, when known;
    # collision code voxelizes each hand in its own frame
    left_frame: tuple | None = None
    right_frame: tuple | None = None
    left_local: np.ndarray | None = None
    right_local: np.ndarray | None = None

    def vertices(self, hand):
        return self.left_vertices if hand == "left" else self.right_vertices

    def frame(self, hand):
        fr = self.left_frame if hand == "left" else self.right_frame
        if fr is None:
            return np.eye(3), np.zeros(3)
        return fr

    def local_vertices(self, hand):
        loc = self.left_local if hand == "left" else self.right_local
        if loc is not None:
            return loc
        R, t = self.frame(hand)
        return (self.vertices(hand) - t) @ R

    def check(self):
        for hand in HANDS:
            if not np.all(np.isfinite(self.vertices(hand))):
                raise ValueError(f"{hand} vertices contain NaN/Inf")
        return self


@dataclass(frozen=True)
class WeakPerspectiveCamera:
    scale: float = 1000.0                     # px / m
    translation_2d: tuple = (112.0, 112.0)    # px

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("camera scale must be positive")
        if len(self.translation_2d) != 2:
            raise ValueError("camera translation must be a 2-vector")


def project_weak_perspective(joints_3d, camera: WeakPerspectiveCamera):
    """Drop depth, scale, shift: (..., 3) -> (..., 2)."""
    j = np.asarray(joints_3d, dtype=np.float64)
    return camera.scale * j[..., :2] + np.asarray(camera.translation_2d, dtype=np.float64)


# ---------------------------------------------------------------- torch path

_TENSOR_CACHE: dict = {}


def template_tensors(template: HandTemplate, hand):
    key = (id(template), hand)
    hit = _TENSOR_CACHE.get(key)
    if hit is not None and hit[0] is template:
        return hit[1]
    v0, sd, j0, jd = template.side(hand)
    t = dict(
        v0=torch.from_numpy(np.ascontiguousarray(v0)),
        sd=torch.from_numpy(np.ascontiguousarray(sd)),
        j0=torch.from_numpy(np.ascontiguousarray(j0)),
        jd=torch.from_numpy(np.ascontiguousarray(jd)),
        w=torch.from_numpy(np.ascontiguousarray(template.skin_weights)),
        reg=torch.from_numpy(np.ascontiguousarray(template.joint_regressor)),
    )
    _TENSOR_CACHE[key] = (template, t)
    return t


def hand_local_torch(template, hand, shape, fingers):
    """One hand in its own frame, differentiable: (local_vertices, local_keypoints)."""
    T = template_tensors(template, hand)
    v = T["v0"] + T["sd"] @ shape
    J = T["j0"] + T["jd"] @ shape
    R = rodrigues_torch(fingers.reshape(15, 3))

    eye = torch.eye(3, dtype=v.dtype)
    A = [None] * 16
    P = [None] * 16
    A[0], P[0] = eye, J[0]
    for lvl in _LEVELS:
        for b in lvl:
            p = b - 1 if (b - 1) % 3 else 0
            A[b] = A[p] @ R[b - 1]
            P[b] = P[p] + A[p] @ (J[b] - J[p])
    A = torch.stack(A)
    P = torch.stack(P)
    t = P - (A @ J[:, :, None])[..., 0]
    M = (T["w"] @ A.reshape(16, 9)).reshape(-1, 3, 3)
    local = (M @ v[:, :, None])[..., 0] + T["w"] @ t
    return local, T["reg"] @ local


def hand_forward_torch(template, hand, shape, orient, fingers):
    """(local_vertices, root_rotation, local_keypoints) of one hand."""
    local, kp = hand_local_torch(template, hand, shape, fingers)
    return local, rodrigues_torch(orient), kp


def forward_torch(template, shapes, orients, fingers, translation, local=None):
    """Both hands from tensors; dict of world/local vertices, joints, frames.

    ``shapes``/``orients``/``fingers`` are (left, right) pairs.  ``local``
    optionally supplies precomputed (local_vertices, local_keypoints) per
    hand when only the orientations or the translation vary.
    """
    out = {}
    joints = []
    for i, hand in enumerate(HANDS):
        if local is None:
            loc, kp_local = hand_local_torch(template, hand, shapes[i], fingers[i])
        else:
            loc, kp_local = local[i]
        Rroot = rodrigues_torch(orients[i])
        origin = translation if hand == "left" else torch.zeros_like(translation)
        out[hand] = dict(local=loc, rotation=Rroot, origin=origin,
                         world=loc @ Rroot.T + origin)
        joints.append(kp_local @ Rroot.T + origin)
    out["joints"] = torch.cat(joints, 0)
    return out


def params_to_tensors(params: TwoHandParams):
    t = lambda a: torch.from_numpy(np.array(a, dtype=np.float64))
    return dict(
        shapes=(t(params.left_shape), t(params.right_shape)),
        orients=(t(params.left_orient), t(params.right_orient)),
        fingers=(t(params.left_fingers), t(params.right_fingers)),
        translation=t(params.translation),
    )


def forward(template: HandTemplate, params: TwoHandParams) -> TwoHandMesh:
    """Pose both hands: right at the origin, left posed then shifted by the translation."""
    with torch.no_grad():
        out = forward_torch(template, **params_to_tensors(params))
    n = lambda x: x.numpy().copy()
    return TwoHandMesh(
        left_vertices=n(out["left"]["world"]),
        right_vertices=n(out["right"]["world"]),
        faces=template.faces,
        joints_3d=n(out["joints"]),
        left_frame=(n(out["left"]["rotation"]), n(out["left"]["origin"])),
        right_frame=(n(out["right"]["rotation"]), n(out["right"]["origin"])),
        left_local=n(out["left"]["local"]),
        right_local=n(out["right"]["local"]),
    )


def regress_joints(template: HandTemplate, mesh: TwoHandMesh):
    """(42, 3) keypoints from posed vertices via the linear regressor."""
    J = template.joint_regressor
    for hand in HANDS:
        v = mesh.vertices(hand)
        if v.ndim != 2 or v.shape != (J.shape[1], 3):
            raise ValueError(f"{hand} vertices have shape {v.shape}, template expects "
                             f"({J.shape[1]}, 3)")
    return np.concatenate([J @ mesh.left_vertices, J @ mesh.right_vertices])
