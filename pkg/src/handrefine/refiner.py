"""Factorized refinement with verification.

Each stage refines one parameter factor (tau, phi, theta or beta) with
the others frozen, then the candidate is kept only if it strictly
lowers both the collision error and the 3D joint error against the
pseudo ground truth.  The targets come from an independent joint
estimate (here: the harness), which is why fitting them is worth
trusting over the initial parameters.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch

from .kinematics import (FACTORS, FACTOR_SIZES, HANDS, TwoHandParams, WeakPerspectiveCamera, forward,
                         forward_torch, hand_local_torch, params_to_tensors)
from .objectives import (PIXEL_UNIT, STAGE_WEIGHTS, TERMS, JointTargets, ObjectiveWeights, Problem,
                         stage_weights_from_config)
from .sdf import GridConfig, collision_loss
from .template import HandTemplate

log = logging.getLogger(__name__)

DEFAULT_ORDER = ("tau", "phi", "theta", "beta")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ErrorPair:
    e_col: float      # summed psi, m
    e_3d: float       # squared joint error, m^2

    def improves_on(self, other: "ErrorPair") -> bool:
        return self.e_col < other.e_col and self.e_3d < other.e_3d


@dataclass(frozen=True)
class RefineConfig:
    stage_order: tuple = DEFAULT_ORDER
    stage_weights: Mapping = field(default_factory=lambda: dict(STAGE_WEIGHTS))
    grid: GridConfig = GridConfig()
    verification: str = "strict"
    camera: WeakPerspectiveCamera = WeakPerspectiveCamera()
    pixel_unit: float = PIXEL_UNIT
    joint: bool = False     # ablation: one stage over all factors at once

    def __post_init__(self):
        order = tuple(self.stage_order)
        if sorted(order) != sorted(FACTORS):
            raise ValueError(f"stage_order must be a permutation of {FACTORS}, got {order}")
        object.__setattr__(self, "stage_order", order)
        if self.verification != "strict":
            raise ValueError(f"unsupported verification mode {self.verification!r}")
        missing = set(FACTORS) - set(self.stage_weights)
        if missing:
            raise ValueError(f"stage weights missing for {sorted(missing)}")

    def weights(self, factor) -> ObjectiveWeights:
        return self.stage_weights[factor]

    def to_dict(self):
        return {
            "stage_order": list(self.stage_order),
            "stage_weights": {k: asdict(self.stage_weights[k]) for k in FACTORS},
            "grid": asdict(self.grid),
            "verification": self.verification,
            "camera": {"scale": self.camera.scale, "translation_2d": list(self.camera.translation_2d)},
            "pixel_unit": self.pixel_unit,
            "joint": self.joint,
        }

    @classmethod
    def from_dict(cls, d: Mapping | None):
        d = dict(d or {})
        known = {"stage_order", "stage_weights", "grid", "verification", "camera", "pixel_unit", "joint"}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown refine config keys: {sorted(bad)}")
        kw = {}
        if "stage_order" in d:
            order = d["stage_order"]
            kw["stage_order"] = tuple(order.split(",") if isinstance(order, str) else order)
        kw["stage_weights"] = stage_weights_from_config(d.get("stage_weights"))
        if "grid" in d:
            kw["grid"] = GridConfig(**d["grid"])
        if "camera" in d:
            cam = d["camera"]
            kw["camera"] = WeakPerspectiveCamera(float(cam.get("scale", 1000.0)),
                                                 tuple(cam.get("translation_2d", (112.0, 112.0))))
        for k in ("verification", "pixel_unit", "joint"):
            if k in d:
                kw[k] = d[k]
        return cls(**kw)


@dataclass(frozen=True)
class StageRecord:
    factor: str
    accepted: bool
    before: ErrorPair
    after: ErrorPair          # errors of the candidate
    iterations: int
    wall_time: float
    aborted: bool = False
    skipped: bool = False     # no strict collision decrease possible (e_col already 0)


@dataclass(frozen=True, eq=False)
class RefineReport:
    stages: tuple
    initial: ErrorPair
    final: ErrorPair
    final_params: TwoHandParams
    config: dict

    @property
    def accepted(self):
        return [s.factor for s in self.stages if s.accepted]

    def to_dict(self, timing=True):
        st = []
        for s in self.stages:
            d = dict(factor=s.factor, accepted=s.accepted, aborted=s.aborted, skipped=s.skipped,
                     iterations=s.iterations,
                     before=asdict(s.before), after=asdict(s.after))
            if timing:
                d["wall_time"] = s.wall_time
            st.append(d)
        return {"stages": st, "initial": asdict(self.initial), "final": asdict(self.final),
                "config": self.config}


# ---------------------------------------------------------------- errors

def obtain_error(params: TwoHandParams, targets: JointTargets, template: HandTemplate,
                 grid: GridConfig = GridConfig()) -> ErrorPair:
    mesh = forward(template, params)
    e3 = float(((mesh.joints_3d - targets.joints_3d) ** 2).sum())
    return ErrorPair(collision_loss(mesh, grid), e3)


# ---------------------------------------------------------------- descent stage

@dataclass
class StageContext:
    template: HandTemplate
    targets: JointTargets
    weights: ObjectiveWeights
    config: RefineConfig
    iterations: int = 0
    aborted: bool = False


def _split(factor, values):
    v = values
    if factor == "tau":
        return {"translation": v}
    if factor == "phi":
        return {"orients": (v[:3], v[3:])}
    if factor == "theta":
        return {"fingers": (v[:45].reshape(15, 3), v[45:].reshape(15, 3))}
    return {"shapes": (v[:10], v[10:])}


def descend(params: TwoHandParams, factors, problem: Problem, weights: ObjectiveWeights,
            step_sizes, iterations: int):
    """Adam on the given factors of the weighted objective.

    Returns (values per factor, iterations run, aborted flag).
    """
    base = params_to_tensors(params)
    vars_ = {f: torch.from_numpy(params.factor(f)).requires_grad_(True) for f in factors}
    opt = torch.optim.Adam([{"params": [vars_[f]], "lr": step_sizes[f]} for f in factors],
                           betas=ADAM_BETAS, eps=ADAM_EPS)
    local = None
    if not set(factors) & {"theta", "beta"}:
        # hand-frame geometry is fixed while only rotations/translation move
        with torch.no_grad():
            local = [hand_local_torch(problem.template, h, base["shapes"][i], base["fingers"][i])
                     for i, h in enumerate(HANDS)]
    active = [k for k in TERMS if weights.term(k) > 0]
    it = 0
    for it in range(1, iterations + 1):
        x = dict(base)
        for f in factors:
            x.update(_split(f, vars_[f]))
        out = forward_torch(problem.template, **x, local=local)
        raw = problem.terms(x, out, only=active)
        loss = sum(weights.term(k) * raw[k] for k in active)
        if not torch.isfinite(loss):
            return None, it, True
        opt.zero_grad()
        loss.backward()
        for f in factors:
            if not torch.all(torch.isfinite(vars_[f].grad)):
                return None, it, True
        opt.step()
    vals = {f: vars_[f].detach().numpy().copy() for f in factors}
    if not all(np.all(np.isfinite(v)) for v in vals.values()):
        return None, it, True
    return vals, iterations, False


def descent_module(params: TwoHandParams, factor: str, ctx: StageContext):
    """Default stage: Adam on the objective over one factor."""
    prob = Problem(ctx.template, ctx.targets, ctx.config.grid, ctx.config.camera, ctx.config.pixel_unit)
    w = ctx.weights
    vals, it, aborted = descend(params, [factor], prob, w, {factor: w.step_size}, w.max_iterations)
    ctx.iterations, ctx.aborted = it, aborted
    if aborted:
        return params.factor(factor)
    return vals[factor]


_DEFAULT_MODULES = {f: descent_module for f in FACTORS}
_MODULES: dict = dict(_DEFAULT_MODULES)


def register_stage_module(factor: str, module: Callable):
    """Route a factor's stage to ``module(params, factor, ctx) -> factor values``."""
    if factor not in FACTORS:
        raise ValueError(f"unknown factor {factor!r}")
    if _MODULES.get(factor) is not _DEFAULT_MODULES[factor]:
        warnings.warn(f"replacing registered stage module for {factor!r}", stacklevel=2)
    _MODULES[factor] = module


def reset_stage_modules():
    _MODULES.clear()
    _MODULES.update(_DEFAULT_MODULES)


def stage_module(factor):
    return _MODULES[factor]


def _refine_stage_ctx(params, factor, targets, template, config):
    ctx = StageContext(template, targets, config.weights(factor), config)
    if ctx.weights.max_iterations == 0 and _MODULES[factor] is descent_module:
        return params, ctx
    try:
        vals = np.asarray(_MODULES[factor](params, factor, ctx), dtype=np.float64).ravel()
    except FloatingPointError:
        ctx.aborted = True
        return params, ctx
    if vals.size != FACTOR_SIZES[factor] or not np.all(np.isfinite(vals)):
        ctx.aborted = True
        return params, ctx
    return params.with_factor(factor, vals), ctx


def refine_stage(params: TwoHandParams, factor: str, targets: JointTargets, template: HandTemplate,
                 config: RefineConfig | None = None) -> TwoHandParams:
    """Candidate parameters with ``factor`` refined by the registered module.

    Non-finite values during the stage abort it and return ``params``.
    """
    return _refine_stage_ctx(params, factor, targets, template, config or RefineConfig())[0]


def _joint_candidate(params, targets, template, config):
    # all factors at once, each with its own stage step size; finger term on
    w = config.weights("theta")
    prob = Problem(template, targets, config.grid, config.camera, config.pixel_unit)
    steps = {f: config.weights(f).step_size for f in FACTORS}
    vals, it, aborted = descend(params, list(FACTORS), prob, w, steps, w.max_iterations)
    if aborted:
        return params, it, True
    for f in FACTORS:
        params = params.with_factor(f, vals[f])
    return params, it, False


def factorized_refine(initial: TwoHandParams, targets: JointTargets, template: HandTemplate,
                      config: RefineConfig | None = None):
    """Run the stages in order with strict both-improve verification.

    Returns (refined params, RefineReport).
    """
    config = config or RefineConfig()
    best = initial
    best_err = err0 = obtain_error(initial, targets, template, config.grid)
    records = []
    stages = ["all"] if config.joint else list(config.stage_order)
    for factor in stages:
        t0 = time.perf_counter()
        if best_err.e_col <= 0.0:
            # the strict rule can never accept: E_col cannot drop below zero
            records.append(StageRecord(factor, False, best_err, best_err, 0, 0.0, skipped=True))
            continue
        if factor == "all":
            cand, iters, aborted = _joint_candidate(best, targets, template, config)
        else:
            cand, ctx = _refine_stage_ctx(best, factor, targets, template, config)
            iters, aborted = ctx.iterations, ctx.aborted
        cand_err = best_err if aborted else obtain_error(cand, targets, template, config.grid)
        ok = (not aborted) and cand_err.improves_on(best_err)
        records.append(StageRecord(factor, ok, best_err, cand_err, iters,
                                   time.perf_counter() - t0, aborted))
        log.debug("stage %s: %s -> %s accepted=%s", factor, best_err, cand_err, ok)
        if ok:
            best, best_err = cand, cand_err
    report = RefineReport(tuple(records), err0, best_err, best, config.to_dict())
    return best, report
