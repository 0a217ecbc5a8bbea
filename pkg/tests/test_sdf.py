import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from handrefine.kinematics import TwoHandMesh, TwoHandParams, forward
from handrefine.primitives import box_mesh, icosphere
from handrefine.sdf import (GRID_MAGIC, GridConfig, MeshSdf, TopologyError, VoxelSdf, collision_loss,
                            depth_report, load_grid, mesh_sdf, pair_collision_loss, penetration_depths,
                            penetration_metrics, psi_torch, sample_psi, save_grid, voxelize_sdf)

from oracles import inside_convex, pair_loss_oracle, point_mesh_distance


@pytest.fixture(scope="module")
def cube():
    v, f = box_mesh()
    return v, f, voxelize_sdf(v, f, GridConfig(33))


@pytest.fixture(scope="module")
def sphere():
    return icosphere(4)


def centers(sdf):
    n = sdf.resolution
    ijk = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), -1).reshape(-1, 3)
    return sdf.origin + ijk * sdf.cell_size


def test_cube_voxels_match_analytic_distance(cube):
    _, _, s = cube
    c = centers(s)
    inside = np.all((c > 0) & (c < 1), 1)
    analytic = np.where(inside, np.minimum(c, 1 - c).min(1), 0.0)
    assert np.abs(s.values.ravel() - analytic).max() < 1e-12
    outside = np.any((c < -1e-9) | (c > 1 + 1e-9), 1)
    assert (s.values.ravel()[outside] == 0).all()
    assert (s.values >= 0).all()


def test_cube_center(cube):
    _, _, s = cube
    # the kink of the distance field at the center is cut by interpolation
    assert abs(sample_psi(s, [0.5, 0.5, 0.5]) - 0.5) < s.cell_size


def test_grid_bounds_have_zero_margin(cube):
    _, _, s = cube
    v = s.values
    for face in (v[0], v[-1], v[:, 0], v[:, -1], v[:, :, 0], v[:, :, -1]):
        assert (face == 0).all()
    lo, hi = s.origin, s.origin + (s.resolution - 1) * s.cell_size
    assert np.all(lo <= -2 * s.cell_size + 1e-12) and np.all(hi >= 1 + 2 * s.cell_size - 1e-12)


def test_sample_psi_trivial(cube):
    _, _, s = cube
    i, j, k = 10, 12, 15
    assert s.values[i, j, k] > 0 and s.values[i + 1, j, k] > 0
    c = s.origin + np.array([i, j, k]) * s.cell_size
    assert sample_psi(s, c) == pytest.approx(s.values[i, j, k], abs=1e-15)
    mid = c + [0.5 * s.cell_size, 0, 0]
    assert sample_psi(s, mid) == pytest.approx(0.5 * (s.values[i, j, k] + s.values[i + 1, j, k]), abs=1e-15)
    assert sample_psi(s, [5.0, 0.5, 0.5]) == 0.0
    # just outside a face: the clamp applies after interpolation
    assert sample_psi(s, [1.0 + 1e-3, 0.5, 0.5]) == 0.0
    assert sample_psi(s, [1.0 - 1e-3, 0.5, 0.5]) == pytest.approx(1e-3, abs=1e-12)
    assert sample_psi(s, [[5.0, 0.5, 0.5], [-3, -3, -3]]).tolist() == [0.0, 0.0]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (20, 3), elements=st.floats(-1.5, 2.5)))
def test_psi_non_negative(points):
    v, f = box_mesh()
    s = mesh_sdf(v, f, GridConfig(16))
    assert (s.sample(points) >= 0).all()


def test_sphere_interior_and_exterior(sphere):
    v, f = sphere
    s = voxelize_sdf(v, f, GridConfig(32))
    rng = np.random.default_rng(0)
    d = rng.normal(size=(500, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.uniform(0, 0.9, 500)
    assert np.abs(sample_psi(s, d * r[:, None]) - (1 - r)).max() < 2 * s.cell_size
    assert (sample_psi(s, d * rng.uniform(1.05, 3, 500)[:, None]) == 0).all()


def test_two_spheres_against_oracle(sphere):
    v, f = sphere
    b = v + [1.5, 0, 0]
    e = pair_collision_loss(v, f, b, f, GridConfig(32))
    o = pair_loss_oracle(v, b, f)
    assert o > 0 and abs(e - o) / o < 0.05


def test_resolution_convergence(sphere):
    v, f = sphere
    b = v + [1.5, 0, 0]
    o = pair_loss_oracle(v, b, f)
    errs, cells = [], []
    for n in (16, 32, 64):
        errs.append(abs(pair_collision_loss(v, f, b, f, GridConfig(n)) - o))
        cells.append(mesh_sdf(b, f, GridConfig(n)).cell)
    for i in range(2):
        assert errs[i + 1] <= errs[i] * cells[i + 1] / cells[i]


def test_per_vertex_depths_within_voxel_diagonal(sphere):
    v, f = sphere
    b = v + [1.5, 0, 0]
    cfg = GridConfig(32)
    s = mesh_sdf(b, f, cfg)
    ins = inside_convex(v, b, f)
    oracle = np.zeros(len(v))
    oracle[ins] = point_mesh_distance(v[ins], b, f)
    assert np.abs(s.sample(v) - oracle).max() <= np.sqrt(3) * s.cell


def _two_hand_mesh(template, params):
    return forward(template, params)


def test_separated_hands_zero(template):
    m = forward(template, TwoHandParams(translation=[0.1, 0, 0.1]))
    assert collision_loss(m) == 0.0
    rep = penetration_metrics(m)
    assert (rep.ave_p, rep.max_p, rep.penetrating_vertex_count) == (0.0, 0.0, 0)


def test_overlapping_hands_positive(template):
    m = forward(template, TwoHandParams(translation=[0.01, 0, 0]))
    assert collision_loss(m) > 0
    rep = penetration_metrics(m)
    assert rep.penetrating_vertex_count > 0 and rep.max_p >= rep.ave_p > 0


def test_mirror_symmetry(template, rng):
    # swapping hands and reflecting x maps the scene onto itself
    p = TwoHandParams(left_fingers=rng.normal(0, .2, (15, 3)), right_fingers=rng.normal(0, .2, (15, 3)),
                      translation=[0.012, 0.004, 0.0])
    m = forward(template, p)
    ref = np.array([-1.0, 1.0, 1.0])
    swapped = TwoHandMesh(left_vertices=m.right_vertices * ref, right_vertices=m.left_vertices * ref,
                          faces=m.faces[:, ::-1], joints_3d=m.joints_3d)
    a = collision_loss(TwoHandMesh(m.left_vertices, m.right_vertices, m.faces, m.joints_3d))
    assert a > 0
    assert collision_loss(swapped) == pytest.approx(a, rel=1e-9)


def test_frame_invariance(template, rng):
    # each hand is voxelized in its own frame, so a global rotation leaves E_col unchanged
    p = TwoHandParams(translation=[0.012, 0.004, 0.0], right_fingers=rng.normal(0, .2, (15, 3)))
    from handrefine.rotations import rodrigues, axis_angle_from_matrix
    R = rodrigues([0.3, -1.0, 0.5])
    q = TwoHandParams(right_fingers=p.right_fingers, translation=R @ p.translation,
                      left_orient=axis_angle_from_matrix(R), right_orient=axis_angle_from_matrix(R))
    assert collision_loss(forward(template, q)) == pytest.approx(collision_loss(forward(template, p)), rel=1e-9)


def test_depth_report_single_vertex():
    rep = depth_report([np.r_[0.003, np.zeros(10)], np.zeros(5)])
    assert (rep.ave_p, rep.max_p, rep.penetrating_vertex_count) == pytest.approx((3.0, 3.0, 1))
    rep = depth_report([np.zeros(3), np.zeros(3)])
    assert (rep.ave_p, rep.max_p, rep.penetrating_vertex_count) == (0.0, 0.0, 0)


def test_penetration_depths_consistent_with_loss(template):
    m = forward(template, TwoHandParams(translation=[0.01, 0.002, 0]))
    a, b = penetration_depths(m)
    assert collision_loss(m) == pytest.approx(a.sum() + b.sum(), rel=1e-12)


def test_non_watertight_rejected():
    v, f = box_mesh()
    with pytest.raises(TopologyError):
        MeshSdf(v, f[:-1], GridConfig(16))
    with pytest.raises((TopologyError, ValueError)):
        MeshSdf(v, np.where(f == 7, 99, f), GridConfig(16))


def test_grid_config_validation():
    with pytest.raises(ValueError):
        GridConfig(4)
    with pytest.raises(ValueError):
        GridConfig(32, margin=1)


def test_cache_and_laziness(sphere):
    v, f = sphere
    cfg = GridConfig(24)
    a = mesh_sdf(v, f, cfg)
    assert mesh_sdf(v.copy(), f, cfg) is a
    fresh = MeshSdf(v, f, cfg)
    assert fresh.known.sum() < fresh.n ** 3        # inside voxels not computed yet
    fresh.sample(np.zeros((1, 3)))
    assert fresh.known.sum() < fresh.n ** 3


def test_grid_dump_round_trip(cube, tmp_path):
    _, _, s = cube
    p = tmp_path / "g.psigrid"
    save_grid(p, s)
    raw = p.read_bytes()
    assert raw[:8] == GRID_MAGIC and len(raw) == 8 + 40 + 8 * s.resolution ** 3
    g = load_grid(p)
    assert g.resolution == s.resolution and g.cell_size == s.cell_size
    assert np.array_equal(g.origin, s.origin) and np.array_equal(g.values, s.values)
    # dumps hold psi only; at voxel centers both sample the stored value
    c = s.origin + np.array([10, 12, 15]) * s.cell_size
    assert sample_psi(g, c) == sample_psi(s, c)
    p.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError):
        load_grid(p)
    p.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_grid(p)


def _sig(s):
    return s.signature()


def test_psi_gradient_matches_finite_differences():
    v, f = icosphere(3)
    cfg = GridConfig(32)
    rng = np.random.default_rng(1)
    P0 = v * 0.9 + [1.2, 0, 0] + rng.normal(0, 0.01, v.shape)
    P = torch.tensor(P0, requires_grad=True)
    V = torch.tensor(v, requires_grad=True)
    (psi_torch(P, V, f, cfg) ** 2).sum().backward()
    ref = MeshSdf(v, f, cfg)

    def F(Pn, Vn):
        s = MeshSdf(Vn, f, cfg)
        if s.signature() != ref.signature():
            return None
        return float((s.sample(Pn) ** 2).sum())

    h = 1e-6
    gp = P.grad.numpy()
    inside = np.nonzero(ref.sample(P0) > 0)[0]
    checked = 0
    for i in rng.choice(inside, 10, replace=False):
        for j in range(3):
            Pp, Pm = P0.copy(), P0.copy()
            Pp[i, j] += h
            Pm[i, j] -= h
            fd = (F(Pp, v) - F(Pm, v)) / (2 * h)
            assert abs(fd - gp[i, j]) <= 1e-5 * max(1.0, abs(fd))
    gv = V.grad.numpy()
    for i in rng.choice(np.nonzero(np.abs(gv).sum(1))[0], 10, replace=False):
        for j in range(3):
            Vp, Vm = v.copy(), v.copy()
            Vp[i, j] += h
            Vm[i, j] -= h
            a, b = F(P0, Vp), F(P0, Vm)
            if a is None or b is None:
                continue
            checked += 1
            fd = (a - b) / (2 * h)
            assert abs(fd - gv[i, j]) <= 1e-5 * max(1.0, abs(fd))
    assert checked >= 10


def test_lazy_and_dense_sampling_agree(sphere):
    v, f = sphere
    cfg = GridConfig(24)
    rng = np.random.default_rng(3)
    q = rng.uniform(-1.3, 1.3, (2000, 3))
    lazy = MeshSdf(v, f, cfg).sample(q)
    dense = sample_psi(MeshSdf(v, f, cfg).dense(), q)
    assert np.allclose(lazy, dense, atol=1e-15)
