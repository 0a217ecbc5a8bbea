import os
import subprocess
import sys

import numpy as np
import pytest

from handrefine import _kernels_py, kernels
from handrefine.kinematics import TwoHandParams, forward
from handrefine.primitives import box_mesh, icosphere
from handrefine.sdf import GridConfig, grid_geometry

from oracles import point_mesh_distance

compiled = kernels.backends().get("compiled")
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def _grid(v, n=24):
    origin, cell = grid_geometry(v, GridConfig(n))
    return origin, cell, (n, n, n)


@pytest.mark.parametrize("mesh", ["box", "sphere", "hand"])
def test_winding_backends_agree(mesh, template):
    if mesh == "box":
        v, f = box_mesh()
    elif mesh == "sphere":
        v, f = icosphere(3)
    else:
        m = forward(template, TwoHandParams(right_fingers=np.full((15, 3), 0.2)))
        v, f = m.right_vertices, m.faces
    origin, cell, shape = _grid(v)
    tris = np.ascontiguousarray(v[f])
    for be in kernels.backends().values():
        for ax in range(3):
            ref = _kernels_py.winding_axis(tris, origin, cell, *shape, ax)
            assert np.array_equal(be.winding_axis(tris, origin, cell, *shape, ax), ref)


def test_winding_matches_box_interior():
    v, f = box_mesh()
    origin, cell, shape = _grid(v)
    ijk = np.stack(np.meshgrid(*[np.arange(24)] * 3, indexing="ij"), -1)
    c = origin + ijk * cell
    inside = np.all((c > 1e-9) & (c < 1 - 1e-9), -1)
    # centers lying on a face plane may go either way
    clear = inside | np.any((c < -1e-9) | (c > 1 + 1e-9), -1)
    for ax in range(3):
        got = kernels.winding_axis(v[f], origin, cell, shape, ax) != 0
        assert np.array_equal(got[clear], inside[clear])
    assert np.array_equal(kernels.inside_votes(v[f], origin, cell, shape)[clear], inside[clear])


def test_closest_points_against_brute_force(rng):
    v, f = icosphere(2)
    q = rng.normal(0, 0.8, (200, 3))
    ref = point_mesh_distance(q, v, f)
    for be in kernels.backends().values():
        d, face, bary = be.closest_points(np.ascontiguousarray(q), np.ascontiguousarray(v[f]))
        assert np.allclose(d, ref, atol=1e-13)
        assert np.allclose(bary.sum(1), 1.0) and (bary >= -1e-12).all()
        p = (bary[:, :, None] * v[f][face]).sum(1)
        assert np.allclose(np.linalg.norm(q - p, axis=1), d, atol=1e-13)


@needs_compiled
def test_closest_points_backends_identical(rng):
    v, f = icosphere(3)
    q = np.ascontiguousarray(rng.normal(0, 0.8, (500, 3)))
    tris = np.ascontiguousarray(v[f])
    a = compiled.closest_points(q, tris)
    b = _kernels_py.closest_points(q, tris)
    assert np.allclose(a[0], b[0], atol=1e-14)


def test_pure_python_switch():
    env = dict(os.environ, HANDREFINE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import handrefine.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
