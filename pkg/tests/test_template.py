import numpy as np
import pytest

from handrefine.template import (FINGERS, N_BONES, N_KEYPOINTS, PARENTS, TemplateConfig, build_template,
                                 edge_counts, finger_chain, is_watertight, load_template, save_template,
                                 template_for)


def test_default_counts(template):
    assert template.n_vertices == 778
    assert template.rest_joints.shape == (N_BONES, 3) == (16, 3)
    assert template.joint_regressor.shape == (N_KEYPOINTS, 778) == (21, 778)
    assert template.skin_weights.shape == (778, 16)
    assert template.shape_dirs.shape == (778, 3, 10)


def test_invariants(template):
    template.check_invariants()
    w = template.skin_weights
    assert (w >= 0).all() and np.allclose(w.sum(1), 1.0, atol=1e-12)
    assert np.allclose(template.joint_regressor.sum(1), 1.0)
    assert is_watertight(template.faces)
    e = edge_counts(template.faces)
    assert set(np.unique(e)) == {2}


def test_deterministic():
    a = build_template(TemplateConfig())
    b = build_template(TemplateConfig())
    assert a.fingerprint() == b.fingerprint()
    for k in ("rest_vertices", "shape_dirs", "faces", "skin_weights", "joint_regressor"):
        assert np.array_equal(getattr(a, k), getattr(b, k))


def test_wider_bones_widen_bbox(template):
    wide = build_template(TemplateConfig(width_scale=5.0))
    ext = lambda v: v.max(0) - v.min(0)
    assert ext(wide.rest_vertices)[0] > 2.0 * ext(template.rest_vertices)[0]
    assert np.allclose(wide.skin_weights.sum(1), 1.0)
    wide.check_invariants()


def test_vertex_budget_respected():
    t = build_template(TemplateConfig(vertex_budget=400))
    assert t.n_vertices == 400
    t.check_invariants()


@pytest.mark.parametrize("kw", [dict(vertex_budget=10), dict(width_scale=0.0), dict(length_scale=-1.0)])
def test_bad_config(kw):
    with pytest.raises(ValueError):
        build_template(TemplateConfig(**kw))


def test_orientation_conventions(template):
    kp = template.rest_keypoints("right")
    assert np.allclose(kp[0], 0.0, atol=1e-12)            # wrist at the origin
    assert kp[16 + 2][1] > 0.1                            # middle tip points +y
    assert kp[16][0] < 0                                  # thumb toward -x
    left = template.rest_keypoints("left")
    assert np.allclose(left * [-1, 1, 1], kp)


def test_finger_chains():
    assert len(FINGERS) == 5
    for f in range(5):
        c = finger_chain(f)
        assert c[0] == 16 + f
        # chain walks tip -> base along parents
        assert PARENTS[c[1]] == c[2] and PARENTS[c[2]] == c[3]


def test_shape_changes_geometry(template):
    beta = np.zeros(10)
    beta[0] = 1.0
    v = template.rest_vertices + template.shape_dirs @ beta
    assert np.abs(v - template.rest_vertices).max() > 1e-3


def test_save_load_round_trip(template, tmp_path):
    p = tmp_path / "t.npz"
    save_template(template, p)
    t2 = load_template(p)
    assert t2.fingerprint() == template.fingerprint()
    assert t2.config == template.config


def test_cache_returns_same_object():
    assert template_for(TemplateConfig()) is template_for(TemplateConfig())
