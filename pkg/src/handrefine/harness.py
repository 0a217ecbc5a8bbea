"""Synthetic interacting-hand scenes and batch experiments.

A scene is a ground-truth two-hand configuration that touches but does
not interpenetrate, an initial estimate made by perturbing each
parameter factor, and noisy keypoint targets standing in for an
independent joint detector.

Ground truth is sampled from a preset (relative placement and finger
curl), rotated by a random global rotation, then slid along an approach
direction and bisected to the first contact.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.spatial.transform import Rotation

from . import metrics
from .kinematics import FACTORS, TwoHandParams, WeakPerspectiveCamera, forward, project_weak_perspective
from .objectives import JointTargets
from .refiner import RefineConfig, factorized_refine
from .rotations import axis_angle_from_matrix, rodrigues
from .sdf import GridConfig, collision_loss, penetration_metrics
from .template import HandTemplate, PALM_KEYPOINTS, default_template

log = logging.getLogger(__name__)

PRESETS = ("clasp", "interlace", "point-touch", "near-miss")
NOISE_SWEEP_MM = (0.0, 10.0, 20.0, 30.0, 40.0)
GT_MAX_AVE_P_MM = 0.5
MAX_ATTEMPTS = 100


class GenerationError(RuntimeError):
    """No acceptable ground truth within the attempt budget."""


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    preset: str = "clasp"
    # harness conventions, not measured CNN error statistics
    tau_scale: float = 0.015      # m
    phi_scale: float = 0.15       # rad
    theta_scale: float = 0.1      # rad per joint coordinate
    beta_scale: float = 0.5
    noise_std_mm: float = 0.0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        for k in ("tau_scale", "phi_scale", "theta_scale", "beta_scale", "noise_std_mm"):
            v = getattr(self, k)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{k} must be finite and non-negative")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def scale(self, factor):
        return getattr(self, f"{factor}_scale")


@dataclass(frozen=True, eq=False)
class Scene:
    gt: TwoHandParams
    initial: TwoHandParams
    targets: JointTargets
    spec: SceneSpec


# ---------------------------------------------------------------- pose priors

def _flex_axes(template, hand):
    """Per finger bone: flexion axis (toward the palm) and abduction axis."""
    kp = template.rest_keypoints(hand)
    palm_normal = np.array([0.0, 0.0, -1.0])
    flex = np.zeros((15, 3))
    abd = np.zeros((15, 3))
    for b in range(1, 16):
        f, j = divmod(b - 1, 3)
        c = b + 1 if j < 2 else 16 + f
        d = kp[c] - kp[b]
        d /= np.linalg.norm(d)
        a = np.cross(d, palm_normal)
        flex[b - 1] = a / np.linalg.norm(a)
        abd[b - 1] = np.cross(flex[b - 1], d)
    return flex, abd


def finger_pose(template, hand, curl, spread=None):
    """(15, 3) pose from per-finger curl angles (rad per joint) and base abduction."""
    flex, abd = _flex_axes(template, hand)
    pose = np.zeros((15, 3))
    curl = np.broadcast_to(np.asarray(curl, dtype=np.float64), (5,))
    spread = np.zeros(5) if spread is None else np.asarray(spread, dtype=np.float64)
    for f in range(5):
        for j in range(3):
            b = 3 * f + j
            pose[b] = flex[b] * curl[f] * (0.6 if f == 0 else 1.0)
            if j == 0:
                pose[b] = pose[b] + abd[b] * spread[f]
    return pose


def _rot(axis, angle):
    return rodrigues(np.asarray(axis, dtype=np.float64) * angle)


def _palm_center(template, hand, shape):
    return template.rest_keypoints(hand, shape)[PALM_KEYPOINTS].mean(0)


def _sample_relative(rng, template, preset, shapes):
    """(params with a guessed translation, unit direction moving the left hand away)."""
    if preset == "near-miss":
        preset = ("clasp", "interlace")[int(rng.integers(2))]
    c_r = _palm_center(template, "right", shapes[1])
    if preset in ("clasp", "interlace"):
        # palms facing: left hand turned over, then rotated about the palm normal
        cross = rng.uniform(np.pi / 3, 2 * np.pi / 3) if preset == "clasp" else rng.uniform(-0.2, 0.2)
        R_l = _rot([0, 0, 1], cross) @ _rot([0, 1, 0], np.pi)
        R_r = np.eye(3)
        if preset == "clasp":
            curl_l, curl_r = rng.uniform(0.2, 0.6, 5), rng.uniform(0.2, 0.6, 5)
            spread_l = spread_r = np.zeros(5)
        else:
            curl_l, curl_r = rng.uniform(0.0, 0.3, 5), rng.uniform(0.0, 0.3, 5)
            spread_l, spread_r = rng.uniform(-0.1, 0.1, 5), rng.uniform(-0.1, 0.1, 5)
        c_l = R_l @ _palm_center(template, "left", shapes[0])
        lateral = np.array([rng.uniform(-0.01, 0.01) + (0.01 if preset == "interlace" else 0.0),
                            rng.uniform(-0.01, 0.01), 0.0])
        tau = c_r - c_l + lateral
        away = np.array([0.0, 0.0, -1.0])        # right palm faces -z
    else:  # point-touch: right index points at the left palm
        R_r = np.eye(3)
        curl_r = np.array([0.8, 0.0, 1.3, 1.3, 1.3]) + rng.uniform(-0.1, 0.1, 5)
        curl_r[1] = rng.uniform(0.0, 0.15)
        spread_r = np.zeros(5)
        curl_l, spread_l = rng.uniform(0.0, 0.2, 5), rng.uniform(-0.05, 0.05, 5)
        # left palm faces -y (toward the fingertip), tilted a little
        R_l = _rot(rng.normal(size=3), rng.uniform(0, 0.3)) @ _rot([1, 0, 0], -np.pi / 2)
        c_l = R_l @ _palm_center(template, "left", shapes[0])
        tip = template.rest_keypoints("right", shapes[1])[17]
        tau = tip - c_l + np.array([rng.uniform(-0.005, 0.005), 0.0, rng.uniform(-0.005, 0.005)])
        away = np.array([0.0, 1.0, 0.0])
    params = TwoHandParams(
        left_shape=shapes[0], right_shape=shapes[1],
        left_orient=axis_angle_from_matrix(R_l), right_orient=axis_angle_from_matrix(R_r),
        left_fingers=finger_pose(template, "left", curl_l, spread_l),
        right_fingers=finger_pose(template, "right", curl_r, spread_r),
        translation=tau)
    return params, away


def _rotate_scene(params: TwoHandParams, R):
    """Rigidly rotate both hands about the origin (the right hand's anchor)."""
    return replace(params,
                   left_orient=axis_angle_from_matrix(R @ rodrigues(params.left_orient)),
                   right_orient=axis_angle_from_matrix(R @ rodrigues(params.right_orient)),
                   translation=R @ params.translation)


def _contact(template, params, away, grid, far=0.3, tol=1e-5):
    """Slide the left hand along ``away`` to the boundary of contact (collision-free side)."""
    base = params.translation

    def collides(s):
        return collision_loss(forward(template, replace(params, translation=base + s * away)), grid) > 0

    lo = 0.0
    if not collides(lo):
        for lo in (-0.01, -0.02, -0.04):
            if collides(lo):
                break
        else:
            return None
    hi = far
    if collides(hi):
        return None
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if collides(mid):
            lo = mid
        else:
            hi = mid
    return hi


def _streams(seed):
    ss = np.random.SeedSequence(int(seed))
    gt, pert, noise = ss.spawn(3)
    return np.random.default_rng(gt), np.random.default_rng(pert), np.random.default_rng(noise)


def sample_ground_truth(spec: SceneSpec, template: HandTemplate, grid: GridConfig = GridConfig(),
                        rng=None) -> TwoHandParams:
    rng = rng if rng is not None else _streams(spec.seed)[0]
    for _ in range(MAX_ATTEMPTS):
        beta_r = np.clip(rng.normal(0.0, 0.3, 10), -1, 1)
        beta_l = np.clip(beta_r + rng.normal(0.0, 0.05, 10), -1, 1)
        params, away = _sample_relative(rng, template, spec.preset, (beta_l, beta_r))
        R = Rotation.random(random_state=rng).as_matrix()
        params = _rotate_scene(params, R)
        away = R @ away
        s = _contact(template, params, away, grid)
        if s is None:
            continue
        if spec.preset == "near-miss":
            s += rng.uniform(0.003, 0.01)
        gt = replace(params, translation=params.translation + s * away)
        if penetration_metrics(forward(template, gt), grid).ave_p <= GT_MAX_AVE_P_MM:
            return gt
    raise GenerationError(f"no ground truth with AVE-P <= {GT_MAX_AVE_P_MM} mm after "
                          f"{MAX_ATTEMPTS} attempts (seed {spec.seed}, preset {spec.preset})")


def perturb(params: TwoHandParams, spec: SceneSpec, rng) -> TwoHandParams:
    out = params
    for f in FACTORS:
        v = params.factor(f)
        out = out.with_factor(f, v + rng.normal(0.0, 1.0, v.shape) * spec.scale(f))
    return out


def generate_scene(spec: SceneSpec, template: HandTemplate | None = None,
                   grid: GridConfig = GridConfig(), camera: WeakPerspectiveCamera | None = None) -> Scene:
    """Deterministic scene for a spec: gt, perturbed initial params and noisy targets."""
    template = template or default_template()
    g_rng, p_rng, n_rng = _streams(spec.seed)
    gt = sample_ground_truth(spec, template, grid, g_rng)
    initial = perturb(gt, spec, p_rng)
    joints = forward(template, gt).joints_3d
    noise = n_rng.normal(0.0, 1.0, joints.shape) * spec.noise_std_mm * 1e-3
    # noise goes on the 3D joints only; 2D targets keep their own (here clean) source
    camera = camera or WeakPerspectiveCamera()
    targets = JointTargets.from_joints(joints + noise, camera, joints_2d=project_weak_perspective(joints, camera))
    return Scene(gt, initial, targets, spec)


# ---------------------------------------------------------------- experiments

@dataclass(frozen=True)
class CorpusSpec:
    count: int = 10
    seed: int = 0
    presets: tuple = ("clasp", "interlace")
    base: SceneSpec = SceneSpec()
    noise_levels_mm: tuple = (10.0,)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("corpus count must be at least 1")
        for p in self.presets:
            if p not in PRESETS:
                raise ValueError(f"unknown preset {p!r}")

    def scene_spec(self, i, noise_mm):
        seed = int(np.random.SeedSequence([int(self.seed), i]).generate_state(1, np.uint64)[0])
        return replace(self.base, seed=seed, preset=self.presets[i % len(self.presets)],
                       noise_std_mm=float(noise_mm))


SCENE_METRICS = ("mpjpe", "i_mpjpe", "ave_p", "max_p")


def evaluate(params: TwoHandParams, gt: TwoHandParams, template: HandTemplate, grid: GridConfig):
    """Metrics of one estimate against ground truth (millimeters)."""
    pm, gm = forward(template, params), forward(template, gt)
    pen = penetration_metrics(pm, grid)
    return {"mpjpe": metrics.mpjpe(pm.joints_3d, gm.joints_3d),
            "i_mpjpe": metrics.i_mpjpe(pm.joints_3d, gm.joints_3d),
            "ave_p": pen.ave_p, "max_p": pen.max_p}


def run_scene(scene: Scene, template: HandTemplate, config: RefineConfig):
    refined, report = factorized_refine(scene.initial, scene.targets, template, config)
    before = evaluate(scene.initial, scene.gt, template, config.grid)
    after = evaluate(refined, scene.gt, template, config.grid)
    return refined, report, before, after


def _job(args, template=None):
    spec, config = args
    template = template or default_template()
    try:
        scene = generate_scene(spec, template, config.grid, config.camera)
    except GenerationError as e:
        return {"seed": spec.seed, "preset": spec.preset, "noise_std_mm": spec.noise_std_mm,
                "failed": str(e)}
    refined, report, before, after = run_scene(scene, template, config)
    return {"seed": spec.seed, "preset": spec.preset, "noise_std_mm": spec.noise_std_mm,
            "initial": before, "refined": after, "accepted": report.accepted,
            "initial_errors": asdict(report.initial), "final_errors": asdict(report.final)}


def _summarize(rows, noise):
    ok = [r for r in rows if "failed" not in r]
    out = {"noise_std_mm": noise, "scenes": len(ok), "failures": len(rows) - len(ok),
           "acceptances": int(sum(len(r["accepted"]) for r in ok))}
    for phase in ("initial", "refined"):
        out[phase] = {m: float(np.mean([r[phase][m] for r in ok])) if ok else float("nan")
                      for m in SCENE_METRICS}
    return out


def run_experiment(corpus: CorpusSpec, config: RefineConfig | None = None, workers: int = 1,
                   template: HandTemplate | None = None):
    """Generate, refine and evaluate a corpus; one summary row per noise level.

    Custom templates are only supported with ``workers == 1``.
    """
    config = config or RefineConfig()
    jobs = [(corpus.scene_spec(i, n), config) for n in corpus.noise_levels_mm for i in range(corpus.count)]
    if workers > 1:
        if template is not None:
            raise ValueError("parallel runs use the default template")
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        rows = [_job(j, template) for j in jobs]
    summary = [_summarize([r for r in rows if r["noise_std_mm"] == n], n) for n in corpus.noise_levels_mm]
    for r in rows:
        if "failed" in r:
            log.warning("scene %s skipped: %s", r["seed"], r["failed"])
    return {"corpus": _corpus_dict(corpus), "config": config.to_dict(), "rows": summary, "scenes": rows,
            "note": "perturbation scales are harness conventions, not measured CNN error statistics"}


def _corpus_dict(c: CorpusSpec):
    d = asdict(c)
    d["presets"] = list(c.presets)
    d["noise_levels_mm"] = list(c.noise_levels_mm)
    return d
