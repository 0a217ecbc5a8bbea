import warnings
from dataclasses import replace

import numpy as np
import pytest

from handrefine.harness import SceneSpec, generate_scene
from handrefine.kinematics import FACTORS, TwoHandParams, forward
from handrefine.objectives import STAGE_WEIGHTS, JointTargets, ObjectiveWeights, finger_term
from handrefine.refiner import (ErrorPair, RefineConfig, StageContext, descent_module, factorized_refine,
                                obtain_error, refine_stage, register_stage_module, reset_stage_modules)
from handrefine.sdf import collision_loss


@pytest.fixture(autouse=True)
def _clean_modules():
    reset_stage_modules()
    yield
    reset_stage_modules()


@pytest.fixture(scope="module")
def clasp(template):
    return generate_scene(SceneSpec(seed=0, preset="clasp", noise_std_mm=10.0), template)


def exact(template, p):
    return JointTargets.from_joints(forward(template, p).joints_3d)


def test_obtain_error_exact_and_disjoint(template):
    p = TwoHandParams(translation=[0.3, 0, 0])
    assert obtain_error(p, exact(template, p), template) == ErrorPair(0.0, 0.0)


def test_obtain_error_left_moved_one_meter(template):
    p = TwoHandParams(translation=[0.3, 0, 0])
    t = exact(template, p)
    q = replace(p, translation=p.translation + [1.0, 0, 0])
    e = obtain_error(q, t, template)
    assert e.e_col == 0.0 and e.e_3d == pytest.approx(21.0, rel=1e-12)


def test_obtain_error_matches_collision_loss(template, clasp):
    e = obtain_error(clasp.initial, clasp.targets, template)
    assert e.e_col > 0
    assert abs(e.e_col - collision_loss(forward(template, clasp.initial))) <= 1e-12


def test_zero_iterations_returns_input(template, clasp):
    w = {k: replace(v, max_iterations=0) for k, v in STAGE_WEIGHTS.items()}
    cfg = RefineConfig(stage_weights=w)
    for f in FACTORS:
        assert refine_stage(clasp.initial, f, clasp.targets, template, cfg) == clasp.initial


def test_tau_stage_recovers_offset(template):
    # only tau is wrong (2 cm); with F_3D-dominated weights the stage lands on it
    gt = TwoHandParams(translation=[0.25, 0.01, 0.0])
    t = exact(template, gt)
    init = replace(gt, translation=gt.translation + [0.02, 0, 0])
    w = dict(STAGE_WEIGHTS, tau=ObjectiveWeights(col=0, j2d=0, j3d=1e3, tau=0, reg=0, step_size=2e-3,
                                                 max_iterations=300))
    cand = refine_stage(init, "tau", t, template, RefineConfig(stage_weights=w))
    # line-search oracle along the offset direction
    ds = np.linspace(-0.03, 0.03, 601)
    errs = [obtain_error(replace(init, translation=init.translation + [d, 0, 0]), t, template).e_3d for d in ds]
    best = init.translation + [ds[int(np.argmin(errs))], 0, 0]
    assert np.linalg.norm(best - gt.translation) < 1e-4
    assert np.linalg.norm(cand.translation - gt.translation) < 1e-3


def test_theta_stage_reduces_finger_twist(template, rng):
    import torch
    gt = TwoHandParams(translation=[0.3, 0, 0])
    twisted = replace(gt, right_fingers=gt.right_fingers + rng.normal(0, 0.4, (15, 3)))
    t = exact(template, gt)
    cand = refine_stage(twisted, "theta", t, template)
    ff = lambda p: float(finger_term(torch.from_numpy(forward(template, p).joints_3d)))
    assert ff(twisted) > 0
    assert ff(cand) < ff(twisted)


def test_collision_free_exact_rejects_everything(template):
    p = TwoHandParams(translation=[0.3, 0, 0])
    out, rep = factorized_refine(p, exact(template, p), template)
    assert out == p
    assert not rep.accepted and all(s.skipped for s in rep.stages)


def test_conjunction_rule(template, clasp):
    # a module that removes collisions by pulling the hands apart but moves joints away
    def apart(params, factor, ctx):
        return params.translation + 0.2 * params.translation / np.linalg.norm(params.translation)

    register_stage_module("tau", apart)
    cfg = RefineConfig(stage_order=("tau", "phi", "theta", "beta"),
                       stage_weights={k: (v if k == "tau" else replace(v, max_iterations=0))
                                      for k, v in STAGE_WEIGHTS.items()})
    out, rep = factorized_refine(clasp.initial, clasp.targets, template, cfg)
    st = rep.stages[0]
    assert st.after.e_col < st.before.e_col and st.after.e_3d > st.before.e_3d
    assert not st.accepted and out == clasp.initial


def test_harness_scene_improves(template, clasp):
    out, rep = factorized_refine(clasp.initial, clasp.targets, template)
    init = obtain_error(clasp.initial, clasp.targets, template)
    fin = obtain_error(out, clasp.targets, template)
    assert rep.accepted
    assert fin.e_col < init.e_col and fin.e_3d <= init.e_3d
    assert fin == rep.final and init == rep.initial
    for s in rep.stages:
        if s.accepted:
            assert s.after.improves_on(s.before)


def test_identity_module_like_zero_iterations(template, clasp):
    register_stage_module("phi", lambda p, f, ctx: p.factor(f))
    out, rep = factorized_refine(clasp.initial, clasp.targets, template,
                                 RefineConfig(stage_order=("phi", "tau", "theta", "beta")))
    assert not rep.stages[0].accepted


def test_oracle_module(template):
    for seed in range(4):
        sc = generate_scene(SceneSpec(seed=seed, preset="interlace"), template)
        reset_stage_modules()
        for f in FACTORS:
            register_stage_module(f, lambda p, fac, ctx, gt=sc.gt: gt.factor(fac))
        out, rep = factorized_refine(sc.initial, sc.targets, template)
        for s in rep.stages:
            if not s.skipped:
                assert s.accepted == s.after.improves_on(s.before)


def test_descent_module_is_default(template, clasp):
    a = refine_stage(clasp.initial, "phi", clasp.targets, template)
    register_stage_module("phi", descent_module)
    b = refine_stage(clasp.initial, "phi", clasp.targets, template)
    assert a == b


def test_register_warns_on_replace():
    register_stage_module("beta", lambda p, f, c: p.factor(f))
    with pytest.warns(UserWarning):
        register_stage_module("beta", lambda p, f, c: p.factor(f))
    with pytest.raises(ValueError):
        register_stage_module("gamma", lambda p, f, c: None)


def test_non_finite_module_aborts(template, clasp):
    register_stage_module("tau", lambda p, f, c: np.full(3, np.nan))
    out, rep = factorized_refine(clasp.initial, clasp.targets, template)
    assert rep.stages[0].aborted and not rep.stages[0].accepted


def test_wrong_size_module_aborts(template, clasp):
    register_stage_module("tau", lambda p, f, c: np.zeros(4))
    assert refine_stage(clasp.initial, "tau", clasp.targets, template) == clasp.initial


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        RefineConfig(stage_order=("tau", "tau", "theta", "beta"))
    with pytest.raises(ValueError):
        RefineConfig(verification="lenient")
    cfg = RefineConfig(stage_order=("beta", "theta", "phi", "tau"))
    back = RefineConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    assert RefineConfig.from_dict({"stage_order": "phi,tau,theta,beta"}).stage_order == ("phi", "tau", "theta", "beta")
    with pytest.raises(ValueError):
        RefineConfig.from_dict({"bogus": 1})


def test_report_serializable(template, clasp):
    import json
    _, rep = factorized_refine(clasp.initial, clasp.targets, template)
    d = rep.to_dict(timing=False)
    json.dumps(d, allow_nan=False)
    assert [s["factor"] for s in d["stages"]] == list(FACTORS)
    assert "wall_time" not in d["stages"][0]


def test_joint_ablation_never_worse(template, clasp):
    out, rep = factorized_refine(clasp.initial, clasp.targets, template, RefineConfig(joint=True))
    assert len(rep.stages) == 1 and rep.stages[0].factor == "all"
    assert rep.final.e_col <= rep.initial.e_col and rep.final.e_3d <= rep.initial.e_3d
