"""Residual terms: supervised losses, the refinement objective, finger constraints.

All squared terms are sums (not means) over joints and coefficients and
the 2D term is an L1 sum, so the per-stage weights keep their relative
meaning.  Units are meters except 2D joints, which are pixels on input
and divided by ``pixel_unit`` inside the 2D term.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Mapping

import numpy as np
import torch

from .kinematics import (FACTORS, FACTOR_SIZES, HANDS, TwoHandParams, WeakPerspectiveCamera,
                         forward_torch, params_to_tensors, project_weak_perspective)
from .rotations import rodrigues
from .sdf import GridConfig, psi_torch, mesh_sdf
from .template import HandTemplate, finger_chain

TERMS = ("col", "j2d", "j3d", "tau", "reg", "finger")
LAMBDAS = {"theta": 10.0, "tau": 10.0, "j3d": 10.0, "reg": 0.1, "j2d": 10.0}
PIXEL_UNIT = 112.0   # half of the nominal 224 px crop


class MissingFieldError(KeyError):
    """A ground-truth record lacks a field a loss needs."""


class NonFiniteObjective(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class JointTargets:
    """Pseudo ground truth the refinement fits: 3D/2D joints, visibility, translation."""
    joints_3d: np.ndarray                 # (42, 3) m
    joints_2d: np.ndarray                 # (42, 2) px
    visibility: np.ndarray                # (42,) bool
    translation_target: np.ndarray        # (3,) m, left wrist - right wrist

    def __post_init__(self):
        shapes = {"joints_3d": (42, 3), "joints_2d": (42, 2), "visibility": (42,),
                  "translation_target": (3,)}
        for name, shape in shapes.items():
            a = np.array(getattr(self, name), dtype=bool if name == "visibility" else np.float64)
            if a.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
            if a.dtype != bool and not np.all(np.isfinite(a)):
                raise ValueError(f"{name}: non-finite values")
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        if self.visibility[0] and self.visibility[21]:
            wrist = self.joints_3d[0] - self.joints_3d[21]
            if np.abs(wrist - self.translation_target).max() > 1e-9:
                raise ValueError("translation_target must equal left wrist - right wrist")

    @classmethod
    def from_joints(cls, joints_3d, camera: WeakPerspectiveCamera | None = None, visibility=None,
                    joints_2d=None):
        j = np.asarray(joints_3d, dtype=np.float64)
        cam = camera or WeakPerspectiveCamera()
        vis = np.ones(42, dtype=bool) if visibility is None else np.asarray(visibility, dtype=bool)
        j2 = project_weak_perspective(j, cam) if joints_2d is None else joints_2d
        return cls(j, j2, vis, j[0] - j[21])


@dataclass(frozen=True)
class ObjectiveWeights:
    col: float = 1.0
    j2d: float = 10.0
    j3d: float = 1e3
    tau: float = 1e3
    reg: float = 0.1
    finger: float = 0.0
    step_size: float = 1e-2
    max_iterations: int = 50

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weight {f.name} must be finite and non-negative, got {v}")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if int(self.max_iterations) != self.max_iterations:
            raise ValueError("max_iterations must be an integer")

    def term(self, name):
        return getattr(self, name)

    @classmethod
    def from_dict(cls, d: Mapping, base: "ObjectiveWeights | None" = None):
        base = base or cls()
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown weight keys: {sorted(bad)}")
        return replace(base, **{k: (int(v) if k == "max_iterations" else float(v)) for k, v in d.items()})


# per-stage step sizes and weights of the optimization-based refiner
STAGE_WEIGHTS = {
    "tau": ObjectiveWeights(col=0.1, step_size=1e-4),
    "phi": ObjectiveWeights(),
    "theta": ObjectiveWeights(finger=1e5),
    "beta": ObjectiveWeights(),
}


def stage_weights_from_config(cfg: Mapping | None) -> dict:
    """Stage-keyed weights; missing stages and keys fall back to the defaults."""
    cfg = cfg or {}
    bad = set(cfg) - set(FACTORS)
    if bad:
        raise ValueError(f"unknown stages in weight config: {sorted(bad)}")
    return {s: ObjectiveWeights.from_dict(cfg.get(s, {}), STAGE_WEIGHTS[s]) for s in FACTORS}


# ---------------------------------------------------------------- finger constraint

def finger_constraint(points):
    """(C1, C2, F_f) for four joints ordered tip -> palm.

    C1 is zero for a planar finger, C2 negative when consecutive bends
    turn opposite ways.  F_f = |C1| + |min(C2, 0)|, non-negative.
    """
    p = torch.as_tensor(np.asarray(points, dtype=np.float64)) if not torch.is_tensor(points) else points
    c1, c2 = _finger_c(p[None])
    ff = c1.abs() + torch.clamp(c2, max=0.0).abs()
    return float(c1[0]), float(c2[0]), float(ff[0])


def _finger_c(p):
    # p: (..., 4, 3) tip -> palm
    v_ab = p[..., 1, :] - p[..., 0, :]
    v_bc = p[..., 2, :] - p[..., 1, :]
    v_cd = p[..., 3, :] - p[..., 2, :]
    n1 = torch.cross(v_ab, v_bc, dim=-1)
    c1 = (n1 * v_cd).sum(-1)
    c2 = (n1 * torch.cross(v_bc, v_cd, dim=-1)).sum(-1)
    return c1, c2


_CHAINS = torch.from_numpy(np.stack([finger_chain(f) + 21 * h for h in range(2) for f in range(5)]))


def finger_term(joints):
    """Sum of F_f over the 10 fingers of a (42, 3) joint tensor."""
    c1, c2 = _finger_c(joints[_CHAINS])
    return c1.abs().sum() + torch.clamp(c2, max=0.0).abs().sum()


# ---------------------------------------------------------------- objective

class Problem:
    """Fixed context of one refinement: template, targets, grid."""

    def __init__(self, template: HandTemplate, targets: JointTargets, grid: GridConfig = GridConfig(),
                 camera: WeakPerspectiveCamera | None = None, pixel_unit: float = PIXEL_UNIT):
        self.template = template
        self.targets = targets
        self.grid = grid
        self.camera = camera or WeakPerspectiveCamera()
        self.pixel_unit = float(pixel_unit)
        t = lambda a: torch.from_numpy(np.array(a, dtype=np.float64))
        self.j3d = t(targets.joints_3d)
        self.j2d = t(targets.joints_2d)
        self.vis = t(targets.visibility.astype(np.float64))[:, None]
        self.tau = t(targets.translation_target)
        self.cam_t = t(self.camera.translation_2d)

    def collision(self, out):
        faces = self.template.faces
        total = 0.0
        for a, b in (("left", "right"), ("right", "left")):
            pts = (out[a]["world"] - out[b]["origin"]) @ out[b]["rotation"]
            total = total + psi_torch(pts, out[b]["local"], faces, self.grid).sum()
        return total

    def terms(self, x, out=None, only=TERMS):
        """Unweighted terms (all six by default) from a tensor dict (see params_to_tensors)."""
        if out is None:
            out = forward_torch(self.template, **x)
        j = out["joints"]
        res = {}
        if "col" in only:
            res["col"] = self.collision(out)
        if "j2d" in only:
            j2 = self.camera.scale * j[:, :2] + self.cam_t
            res["j2d"] = (self.vis * (j2 - self.j2d)).abs().sum() / self.pixel_unit
        if "j3d" in only:
            res["j3d"] = ((j - self.j3d) ** 2).sum()
        if "tau" in only:
            res["tau"] = ((x["translation"] - self.tau) ** 2).sum()
        if "reg" in only:
            res["reg"] = ((x["shapes"][0] - x["shapes"][1]) ** 2).sum()
        if "finger" in only:
            res["finger"] = finger_term(j)
        return res

    def weighted(self, x, weights: ObjectiveWeights, out=None):
        raw = self.terms(x, out)
        return {k: weights.term(k) * v for k, v in raw.items()}

    def signature(self, x):
        """Discrete state of the collision term (grid placement, inside masks,
        sample cells, clamp pattern).  Finite differences are only valid while
        it is constant.  Which face a voxel's nearest point is attributed to
        is left out: ties at shared edges and vertices flip it without
        changing the distance or its gradient."""
        with torch.no_grad():
            out = forward_torch(self.template, **x)
        sig = []
        for a, b in (("left", "right"), ("right", "left")):
            sdf = mesh_sdf(out[b]["local"].numpy(), self.template.faces, self.grid)
            pts = ((out[a]["world"] - out[b]["origin"]) @ out[b]["rotation"]).numpy()
            corners, _, _, valid, mixed = sdf._stencil(pts)
            _, st = sdf.sample(pts, with_grad=True)
            sig.append((sdf.signature(), corners.tobytes(), valid.tobytes(), mixed.tobytes(),
                        st["positive"].tobytes()))
        return tuple(sig)


def optimization_objective(params: TwoHandParams, targets: JointTargets, weights: ObjectiveWeights,
                           template: HandTemplate, grid: GridConfig = GridConfig(),
                           camera: WeakPerspectiveCamera | None = None, pixel_unit: float = PIXEL_UNIT):
    """(F_opt, {term: weighted value})."""
    prob = Problem(template, targets, grid, camera, pixel_unit)
    with torch.no_grad():
        terms = {k: float(v) for k, v in prob.weighted(params_to_tensors(params), weights).items()}
    return sum(terms[k] for k in TERMS), terms


def _tensors_from_vector(vec):
    i = 0
    parts = {}
    for f in FACTORS:
        parts[f] = vec[i:i + FACTOR_SIZES[f]]
        i += FACTOR_SIZES[f]
    return dict(
        shapes=(parts["beta"][:10], parts["beta"][10:]),
        orients=(parts["phi"][:3], parts["phi"][3:]),
        fingers=(parts["theta"][:45].reshape(15, 3), parts["theta"][45:].reshape(15, 3)),
        translation=parts["tau"],
    )


def factor_slice(factor):
    if factor not in FACTOR_SIZES:
        raise ValueError(f"unknown factor {factor!r}; expected one of {FACTORS}")
    start = 0
    for f in FACTORS:
        if f == factor:
            return slice(start, start + FACTOR_SIZES[f])
        start += FACTOR_SIZES[f]


def objective_closure(targets: JointTargets, weights: ObjectiveWeights, template: HandTemplate,
                      grid: GridConfig = GridConfig(), terms=TERMS, **kw):
    """Differentiable F(vec) over the flat 119-vector (to_vector order)."""
    prob = Problem(template, targets, grid, **kw)

    def f(vec):
        w = prob.weighted(_tensors_from_vector(vec), weights)
        return sum(w[k] for k in terms)

    f.problem = prob
    return f


def gradient(objective, params: TwoHandParams, factor):
    """Gradient over the active factor, as a full-length vector with zeros elsewhere."""
    sl = factor_slice(factor)
    vec = torch.from_numpy(params.to_vector())
    active = vec[sl].clone().requires_grad_(True)
    full = torch.cat([vec[:sl.start], active, vec[sl.stop:]])
    val = objective(full)
    if not torch.isfinite(val):
        raise NonFiniteObjective(f"objective is not finite ({float(val.detach())})")
    (g,) = torch.autograd.grad(val, active)
    out = np.zeros(vec.numel())
    out[sl] = g.numpy()
    return out


# ---------------------------------------------------------------- supervised losses

@dataclass(frozen=True)
class LossRecord:
    theta: float
    tau: float
    j3d: float
    reg: float
    j2d: float
    total: float


_GT_FIELDS = ("left_shape", "right_shape", "left_fingers", "right_fingers", "translation",
              "joints_3d", "joints_2d", "visibility")


def supervised_losses(pred: TwoHandParams, gt: Mapping, template: HandTemplate,
                      camera: WeakPerspectiveCamera | None = None, lambdas=None) -> LossRecord:
    """Training-style losses of a prediction against a ground-truth record.

    ``gt`` maps the fields in ``_GT_FIELDS`` to arrays; finger poses are
    compared as rotation matrices.
    """
    for k in _GT_FIELDS:
        if k not in gt or gt[k] is None:
            raise MissingFieldError(f"ground truth lacks field {k!r}")
    lam = dict(LAMBDAS, **(lambdas or {}))
    from .kinematics import forward
    cam = camera or WeakPerspectiveCamera()
    j3 = forward(template, pred).joints_3d
    j2 = project_weak_perspective(j3, cam)

    l_theta = 0.0
    for hand in HANDS:
        l_theta += float(((np.asarray(gt[f"{hand}_shape"]) - getattr(pred, f"{hand}_shape")) ** 2).sum())
        R_gt = np.stack([rodrigues(r) for r in np.asarray(gt[f"{hand}_fingers"]).reshape(15, 3)])
        R_pr = np.stack([rodrigues(r) for r in getattr(pred, f"{hand}_fingers")])
        l_theta += float(((R_gt - R_pr) ** 2).sum())
    l_tau = float(((np.asarray(gt["translation"]) - pred.translation) ** 2).sum())
    l_j3d = float(((np.asarray(gt["joints_3d"]) - j3) ** 2).sum())
    l_reg = float(((pred.left_shape - pred.right_shape) ** 2).sum())
    vis = np.asarray(gt["visibility"], dtype=np.float64)[:, None]
    l_j2d = float(np.abs(vis * (np.asarray(gt["joints_2d"]) - j2)).sum())
    total = (lam["theta"] * l_theta + lam["tau"] * l_tau + lam["j3d"] * l_j3d
             + lam["reg"] * l_reg + lam["j2d"] * l_j2d)
    return LossRecord(l_theta, l_tau, l_j3d, l_reg, l_j2d, total)
