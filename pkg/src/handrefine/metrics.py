"""Pose and mesh error metrics, reported in millimeters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INTERACTING_MIN_JOINTS = 30      # strictly more valid joints than this
CLOSE_MEAN_DISTANCE_MM = 40.0


class EmptyMetricError(ValueError):
    """No valid joints to average over."""


class DegenerateAlignment(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentResult:
    scale: float
    translation: np.ndarray
    aligned: np.ndarray


def _mask(valid, n):
    if valid is None:
        return np.ones(n, dtype=bool)
    v = np.asarray(valid, dtype=bool)
    if v.shape != (n,):
        raise ValueError(f"validity mask must have shape ({n},), got {v.shape}")
    return v


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} must both be (N, 3)")
    return p, g


def mpjpe(pred, gt, valid=None) -> float:
    """Mean joint error after moving each predicted hand onto its ground-truth wrist."""
    p, g = _pair(pred, gt)
    if p.shape[0] != 42:
        raise ValueError("expected 42 joints (left 21, right 21)")
    v = _mask(valid, 42)
    if not (v[0] and v[21]):
        raise EmptyMetricError("both wrists must be valid for wrist alignment")
    aligned = p.copy()
    for s in (0, 21):
        aligned[s:s + 21] += g[s] - p[s]
    return _mean_dist(aligned, g, v)


def _mean_dist(a, b, v):
    if not v.any():
        raise EmptyMetricError("no valid points")
    return float(np.linalg.norm(a[v] - b[v], axis=1).mean() * 1e3)


def align_scale_translation(pred, gt) -> AlignmentResult:
    """Least-squares s, t minimizing sum |s p_i + t - g_i|^2 (no rotation)."""
    p, g = _pair(pred, gt)
    pc, gc = p.mean(0), g.mean(0)
    ph, gh = p - pc, g - gc
    den = float((ph * ph).sum())
    if den <= 1e-24 * max(1.0, float((gh * gh).sum())) or den == 0.0:
        raise DegenerateAlignment("predicted points are coincident")
    s = float((ph * gh).sum()) / den
    if not s > 0:
        raise DegenerateAlignment(f"optimal scale is not positive ({s:.3g})")
    t = gc - s * pc
    return AlignmentResult(s, t, s * p + t)


def i_mpjpe(pred, gt, valid=None) -> float:
    """Mean joint error after one shared scale + translation fit over both hands."""
    p, g = _pair(pred, gt)
    v = _mask(valid, len(p))
    if v.sum() < 2:
        raise EmptyMetricError("need at least two valid joints")
    al = align_scale_translation(p[v], g[v])
    return float(np.linalg.norm(al.aligned - g[v], axis=1).mean() * 1e3)


def _stack_vertices(mesh):
    if hasattr(mesh, "left_vertices"):
        return np.concatenate([mesh.left_vertices, mesh.right_vertices])
    return np.asarray(mesh, dtype=np.float64).reshape(-1, 3)


def mpvpe(pred, gt, template=None, pred_wrists=None, gt_wrists=None) -> float:
    """Mean vertex error with each hand moved onto its ground-truth wrist.

    ``pred``/``gt`` are TwoHandMesh values or (2V, 3) arrays (left then
    right).  Wrists are regressed with the template unless given.
    """
    p, g = _pair(_stack_vertices(pred), _stack_vertices(gt))
    n = len(p) // 2
    if len(p) != 2 * n or len(p) == 0:
        raise ValueError("vertex arrays must hold two hands of equal size")
    if pred_wrists is None or gt_wrists is None:
        if template is None:
            raise ValueError("template needed to regress wrists")
        if template.n_vertices != n:
            raise ValueError(f"template has {template.n_vertices} vertices per hand, meshes have {n}")
        w = template.joint_regressor[0]
        pred_wrists = (w @ p[:n], w @ p[n:])
        gt_wrists = (w @ g[:n], w @ g[n:])
    aligned = p.copy()
    for i in range(2):
        aligned[i * n:(i + 1) * n] += np.asarray(gt_wrists[i]) - np.asarray(pred_wrists[i])
    return _mean_dist(aligned, g, np.ones(len(p), dtype=bool))


def i_mpvpe(pred, gt) -> float:
    p, g = _pair(_stack_vertices(pred), _stack_vertices(gt))
    al = align_scale_translation(p, g)
    return float(np.linalg.norm(al.aligned - g, axis=1).mean() * 1e3)


def mean_inter_distance_mm(joints, valid=None) -> float:
    """Mean over valid joints of the distance to the nearest valid joint of the other hand."""
    j = np.asarray(joints, dtype=np.float64).reshape(42, 3)
    v = _mask(valid, 42)
    a, b = j[:21][v[:21]], j[21:][v[21:]]
    if len(a) == 0 or len(b) == 0:
        return float("inf")
    d = np.linalg.norm(a[:, None] - b[None], axis=-1)
    return float(np.concatenate([d.min(1), d.min(0)]).mean() * 1e3)


def classify_interaction(joints, valid=None) -> str:
    """'single', 'interacting' or 'closely-interacting'."""
    v = _mask(valid, 42)
    if v.sum() <= INTERACTING_MIN_JOINTS:
        return "single"
    if mean_inter_distance_mm(joints, v) < CLOSE_MEAN_DISTANCE_MM:
        return "closely-interacting"
    return "interacting"
