import math

import numpy as np
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from handrefine.rotations import (axis_angle_from_matrix, compose, quaternion_to_matrix, rodrigues,
                                  rodrigues_torch, skew, swing)

vec3 = arrays(np.float64, 3, elements=st.floats(-3.0, 3.0))


def test_zero_is_identity():
    assert np.array_equal(rodrigues(np.zeros(3)), np.eye(3))


def test_half_turn_about_x():
    assert np.allclose(rodrigues([math.pi, 0, 0]), np.diag([1.0, -1.0, -1.0]), atol=1e-15)


def test_matches_quaternion_oracle(rng):
    for _ in range(50):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        v = 0.3 * axis
        R = rodrigues(v)
        q = np.concatenate([[math.cos(0.15)], math.sin(0.15) * axis])
        assert np.allclose(R, quaternion_to_matrix(q), atol=1e-14)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-14)
        assert abs(np.trace(R) - (1 + 2 * math.cos(0.3))) < 1e-14


@settings(max_examples=200, deadline=None)
@given(vec3)
def test_round_trip(v):
    R = rodrigues(v)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-12
    assert np.allclose(rodrigues(axis_angle_from_matrix(R)), R, atol=1e-9)


def test_round_trip_near_pi():
    for eps in (0.0, 1e-8, 1e-6, 1e-3):
        v = np.array([0.3, -0.5, 0.8])
        v = v / np.linalg.norm(v) * (math.pi - eps)
        R = rodrigues(v)
        assert np.allclose(rodrigues(axis_angle_from_matrix(R)), R, atol=1e-9)


def test_non_finite_rejected():
    import pytest
    with pytest.raises(ValueError):
        rodrigues([np.nan, 0, 0])


def test_skew_is_cross(rng):
    a, b = rng.normal(size=(2, 3))
    assert np.allclose(skew(a) @ b, np.cross(a, b))


def test_compose(rng):
    a, b = rng.normal(0, 0.7, (2, 3))
    assert np.allclose(rodrigues(compose(a, b)), rodrigues(a) @ rodrigues(b), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(vec3, vec3)
def test_swing_maps_direction_without_twist(u, v):
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    r = swing(u, v)
    uu, vv = u / np.linalg.norm(u), v / np.linalg.norm(v)
    assert np.allclose(rodrigues(r) @ uu, vv, atol=1e-9)
    # swing axis is orthogonal to the source direction
    assert abs(r @ uu) < 1e-9 * max(1.0, np.linalg.norm(r))


def test_swing_antiparallel():
    r = swing([0, 1, 0], [0, -1, 0])
    assert np.allclose(rodrigues(r) @ [0, 1, 0], [0, -1, 0], atol=1e-12)


def test_torch_matches_numpy(rng):
    V = rng.normal(0, 1, (20, 3))
    V[0] = 0.0
    V[1] = 1e-9
    R = rodrigues_torch(torch.from_numpy(V)).numpy()
    for v, r in zip(V, R):
        assert np.allclose(r, rodrigues(v), atol=1e-14)


def test_torch_gradient_finite_at_zero():
    v = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    rodrigues_torch(v).sum().backward()
    assert torch.all(torch.isfinite(v.grad))
    assert torch.autograd.gradcheck(rodrigues_torch, (torch.tensor([0.3, -0.2, 0.5], dtype=torch.float64,
                                                                    requires_grad=True),))
