"""Voxelized penetration-depth fields and the collision loss built on them.

psi(x) = -min(SDF(x), 0): zero outside a mesh, distance to the surface
inside.  Grids store a signed depth (positive inside, negative outside)
and sampling clamps after trilinear interpolation, so a point just
outside the surface reads zero instead of picking up the interior value
of a neighbouring voxel.  Exact outside distances are only needed for
voxels within one cell of an inside voxel.

Meshes made of several closed components (the capsule-per-bone hands)
are treated as a union: a voxel's depth is the largest depth over the
components containing it, so faces buried inside another capsule do not
shrink the field.

Grids are cubic, axis aligned in the frame of the mesh they describe and
sized from its bounding box plus a margin.  The cell size is snapped to
a geometric lattice and the origin to the cell lattice, so the grid
placement is piecewise constant in the vertex positions; between snaps
the sampled values are differentiable in both the query points and the
mesh vertices.
"""
from __future__ import annotations

import hashlib
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import binary_dilation
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import kernels
from .template import edge_counts

GRID_MAGIC = b"PSIGRID1"
_SNAP_STEPS = 64  # cell sizes per factor e


class TopologyError(ValueError):
    """Mesh is not watertight (some edge not shared by exactly two faces)."""


@dataclass(frozen=True)
class GridConfig:
    resolution: int = 32
    margin: int = 2

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError(f"grid resolution must be >= 8, got {self.resolution}")
        if self.margin < 2:
            raise ValueError("grid margin must be at least 2 cells")
        if self.resolution - 3 - 2 * self.margin < 1:
            raise ValueError("grid too small for its margin")


@dataclass(frozen=True, eq=False)
class VoxelSdf:
    resolution: int
    origin: np.ndarray        # center of voxel (0, 0, 0), meters
    cell_size: float
    values: np.ndarray        # (N, N, N) psi, meters, [x, y, z] indexing
    # signed depth, + inside / - outside; exact within one cell of an inside
    # voxel, -cell_size beyond.  None for grids read back from a dump.
    signed: np.ndarray | None = None


@dataclass(frozen=True)
class PenetrationReport:
    ave_p: float              # mm, mean over penetrating vertices
    max_p: float              # mm, max over all vertices
    penetrating_vertex_count: int


def grid_geometry(vertices, config: GridConfig):
    """Snapped (origin, cell) for a cube grid around the vertices."""
    v = np.asarray(vertices, dtype=np.float64)
    lo, hi = v.min(0), v.max(0)
    n, m = config.resolution, config.margin
    extent = float((hi - lo).max())
    raw = max(extent, 1e-9) / (n - 3 - 2 * m)
    cell = math.exp(math.ceil(math.log(raw) * _SNAP_STEPS) / _SNAP_STEPS)
    half = (n - 1) // 2
    origin = (np.floor(0.5 * (lo + hi) / cell) - half) * cell
    return origin, cell


def mesh_components(faces, n_vertices):
    """Connected-component label of every face."""
    f = np.asarray(faces)
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices))
    _, labels = connected_components(adj, directed=False)
    return labels[f[:, 0]]


_BITS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=bool)
_TOPOLOGY: dict = {}


def _topology(faces, n_vertices):
    """Face component labels; raises TopologyError for open meshes.  Cached."""
    key = (hashlib.blake2b(np.ascontiguousarray(faces).tobytes(), digest_size=16).digest(), n_vertices)
    hit = _TOPOLOGY.get(key)
    if hit is None:
        if len(faces) == 0 or not np.all(edge_counts(faces) == 2):
            raise TopologyError("mesh is not watertight: every edge must be shared by exactly two faces")
        if faces.min() < 0 or faces.max() >= n_vertices:
            raise TopologyError("face index out of range")
        hit = mesh_components(faces, n_vertices)
        if len(_TOPOLOGY) > 32:
            _TOPOLOGY.clear()
        _TOPOLOGY[key] = hit
    return hit


class MeshSdf:
    """Lazily evaluated psi grid of one closed mesh.

    Inside/outside is decided for the whole grid up front (cheap scanline
    winding counts); distances are computed only for voxels that are
    asked for, and remembered.  For each computed voxel the nearest
    surface feature is kept so the value can be differentiated with
    respect to the mesh vertices.
    """

    def __init__(self, vertices, faces, config: GridConfig):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        components = _topology(self.faces, len(self.vertices))
        self.config = config
        n = self.n = config.resolution
        self.origin, self.cell = grid_geometry(self.vertices, config)
        tris = self.vertices[self.faces]
        self.tris = tris

        self._comps = []
        for c in np.unique(components):
            fidx = np.nonzero(components == c)[0]
            t = np.ascontiguousarray(tris[fidx])
            lo = np.maximum(np.floor((t.reshape(-1, 3).min(0) - self.origin) / self.cell).astype(int), 0)
            hi = np.minimum(np.ceil((t.reshape(-1, 3).max(0) - self.origin) / self.cell).astype(int), n - 1)
            if np.any(hi < lo):
                continue
            shape = hi - lo + 1
            sub_origin = self.origin + lo * self.cell
            inside = kernels.inside_votes(t, sub_origin, self.cell, shape)
            if inside.any():
                self._comps.append((fidx, t, lo, hi, inside))

        self.inside = np.zeros((n, n, n), dtype=bool)
        for _, _, lo, hi, ins in self._comps:
            self.inside[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] |= ins
        self._flat_inside = self.inside.ravel()

        size = n ** 3
        self.values = np.zeros(size)           # signed depth where known
        self.known = np.zeros(size, dtype=bool)
        self.near_face = np.full(size, -1, dtype=np.int64)
        self.near_bary = np.zeros((size, 3))
        # d(depth)/d(closest point), i.e. -unit(center - closest) inside, +unit outside
        self.near_dir = np.zeros((size, 3))

    # -- evaluation -----------------------------------------------------

    def centers(self, flat):
        ijk = np.stack(np.unravel_index(flat, (self.n,) * 3), -1)
        return self.origin + ijk * self.cell, ijk

    def ensure(self, flat):
        flat = np.unique(np.asarray(flat, dtype=np.int64))
        todo = flat[~self.known[flat]]
        if len(todo) == 0:
            return
        ins = self._flat_inside[todo]
        self._ensure_inside(todo[ins])
        self._ensure_outside(todo[~ins])
        self.known[todo] = True

    def _record(self, g, p, d, face, bary, sign):
        tri = self.tris[face]
        closest = (bary[:, :, None] * tri).sum(1)
        self.values[g] = sign * d
        self.near_face[g] = face
        self.near_bary[g] = bary
        self.near_dir[g] = -sign * (p - closest) / np.maximum(d, 1e-300)[:, None]

    def _ensure_inside(self, todo):
        if len(todo) == 0:
            return
        p, ijk = self.centers(todo)
        best = np.zeros(len(todo))
        for fidx, t, lo, hi, ins in self._comps:
            inb = np.all((ijk >= lo) & (ijk <= hi), 1)
            sel = np.nonzero(inb)[0]
            if len(sel) == 0:
                continue
            rel = ijk[sel] - lo
            sel = sel[ins[rel[:, 0], rel[:, 1], rel[:, 2]]]
            if len(sel) == 0:
                continue
            d, f, w = kernels.closest_points(p[sel], t)
            upd = d > best[sel]
            s = sel[upd]
            best[s] = d[upd]
            self._record(todo[s], p[s], d[upd], fidx[f[upd]], w[upd], 1.0)

    def _ensure_outside(self, todo):
        if len(todo) == 0:
            return
        p, _ = self.centers(todo)
        d, f, w = kernels.closest_points(p, self.tris)
        self._record(todo, p, d, f, w, -1.0)

    def band(self):
        """Flat indices whose signed depth sampling can ever read."""
        return np.nonzero(binary_dilation(self.inside, np.ones((3, 3, 3), dtype=bool)).ravel())[0]

    def dense(self) -> VoxelSdf:
        band = self.band()
        self.ensure(band)
        shape = (self.n,) * 3
        signed = np.full(self.n ** 3, -self.cell)
        signed[band] = self.values[band]
        psi = np.maximum(signed, 0.0)
        return VoxelSdf(self.n, self.origin.copy(), self.cell, psi.reshape(shape), signed.reshape(shape))

    def _stencil(self, points):
        """Trilinear stencil: corner flat indices, weights, d(weights)/d(point),
        in-grid mask, and whether any corner is inside the mesh."""
        q = np.atleast_2d(np.asarray(points, dtype=np.float64))
        corners, w, dw, valid = trilinear_stencil(q, self.origin, self.cell, self.n)
        mixed = valid & self._flat_inside[corners].any(1)
        return corners, w, dw, valid, mixed

    def sample(self, points, with_grad=False):
        corners, w, dw, valid, mixed = self._stencil(points)
        self.ensure(corners[mixed].ravel())
        vals = np.where(mixed[:, None], self.values[corners], 0.0)
        raw = (w * vals).sum(1)
        pos = raw > 0
        psi = np.where(pos, raw, 0.0)
        if not with_grad:
            return psi
        # clamp: no gradient where the interpolated depth is not positive
        w = w * pos[:, None]
        dw = dw * pos[:, None, None]
        return psi, dict(corners=corners, w=w, dw=dw, vals=vals, valid=valid, positive=pos)

    def vertex_gradient(self, voxel_coeff):
        """d(sum_i coeff_i * depth_i)/d(vertices) for {flat voxel: coeff}."""
        flat, coeff = voxel_coeff
        grad = np.zeros_like(self.vertices)
        keep = (self.near_face[flat] >= 0) & (coeff != 0)
        flat, coeff = flat[keep], coeff[keep]
        if len(flat) == 0:
            return grad
        # envelope theorem: d depth / d vertex_k = bary_k * d depth / d closest
        contrib = coeff[:, None, None] * self.near_bary[flat][:, :, None] * self.near_dir[flat][:, None, :]
        np.add.at(grad, self.faces[self.near_face[flat]].ravel(), contrib.reshape(-1, 3))
        return grad

    def signature(self):
        return (self.origin.tobytes(), self.cell, self.inside.tobytes())


# ---------------------------------------------------------------- caching

class _LRU:
    def __init__(self, size=8):
        self.size = size
        self.data = OrderedDict()

    def get(self, vertices, faces, config):
        h = hashlib.blake2b(np.ascontiguousarray(vertices).tobytes(), digest_size=16)
        h.update(np.ascontiguousarray(faces).tobytes())
        key = (h.digest(), config)
        hit = self.data.get(key)
        if hit is not None:
            self.data.move_to_end(key)
            return hit
        sdf = MeshSdf(vertices, faces, config)
        self.data[key] = sdf
        if len(self.data) > self.size:
            self.data.popitem(last=False)
        return sdf


_CACHE = _LRU()


def mesh_sdf(vertices, faces, config: GridConfig) -> MeshSdf:
    """Cached :class:`MeshSdf` (keyed on vertex bytes, faces and config)."""
    return _CACHE.get(vertices, faces, config)


# ---------------------------------------------------------------- public ops

def voxelize_sdf(vertices, faces, config: GridConfig = GridConfig()) -> VoxelSdf:
    """Full psi grid of a watertight mesh."""
    return MeshSdf(vertices, faces, config).dense()


def trilinear_stencil(q, origin, cell, n):
    """Corner flat indices (Q, 8), weights, weight gradients and in-grid mask."""
    g = (q - origin) / cell
    valid = np.all((g >= 0) & (g <= n - 1), 1)
    i0 = np.clip(np.floor(g), 0, n - 2).astype(np.int64)
    fr = g - i0
    idx = i0[:, None, :] + _BITS                                   # (Q, 8, 3)
    corners = (idx[..., 0] * n + idx[..., 1]) * n + idx[..., 2]
    fac = np.where(_BITS, fr[:, None, :], 1.0 - fr[:, None, :])   # (Q, 8, 3)
    w = fac.prod(-1)
    sgn = np.where(_BITS, 1.0, -1.0) / cell
    dw = np.stack([sgn[:, 0] * fac[..., 1] * fac[..., 2],
                   sgn[:, 1] * fac[..., 0] * fac[..., 2],
                   sgn[:, 2] * fac[..., 0] * fac[..., 1]], -1)
    w[~valid] = 0.0
    dw[~valid] = 0.0
    corners[~valid] = 0
    return corners, w, dw, valid


def sample_psi(sdf: VoxelSdf, points):
    """psi at one point (3,) or many (Q, 3); zero outside the grid.

    Interpolates the signed depth and clamps at zero.  Grids without a
    signed field (read from a dump) interpolate psi directly.
    """
    q = np.asarray(points, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    corners, w, _, valid = trilinear_stencil(q, sdf.origin, sdf.cell_size, sdf.resolution)
    if sdf.signed is None:
        out = (w * sdf.values.ravel()[corners]).sum(1)
    else:
        s = sdf.signed.ravel()[corners]
        mixed = valid & (s > 0).any(1)
        out = np.where(mixed, np.maximum((w * s).sum(1), 0.0), 0.0)
    out[~valid] = 0.0
    return out[0] if single else out


def _hand_sdf(mesh, hand, config):
    return mesh_sdf(mesh.local_vertices(hand), mesh.faces, config)


def _into_frame(points, frame):
    R, t = frame
    return (np.asarray(points) - t) @ R


def penetration_depths(mesh, config: GridConfig = GridConfig()):
    """(psi_right(V_left), psi_left(V_right)), meters."""
    sl = _hand_sdf(mesh, "left", config)
    sr = _hand_sdf(mesh, "right", config)
    d_left = sr.sample(_into_frame(mesh.left_vertices, mesh.frame("right")))
    d_right = sl.sample(_into_frame(mesh.right_vertices, mesh.frame("left")))
    return d_left, d_right


def collision_loss(mesh, config: GridConfig = GridConfig()) -> float:
    """E_col = sum psi_r over left vertices + sum psi_l over right vertices (meters)."""
    a, b = penetration_depths(mesh, config)
    return float(a.sum() + b.sum())


def pair_collision_loss(verts_a, faces_a, verts_b, faces_b, config: GridConfig = GridConfig()):
    """Collision loss between two arbitrary watertight meshes in a shared frame."""
    sa = mesh_sdf(verts_a, faces_a, config)
    sb = mesh_sdf(verts_b, faces_b, config)
    return float(sb.sample(verts_a).sum() + sa.sample(verts_b).sum())


def depth_report(depths) -> PenetrationReport:
    d = np.concatenate([np.ravel(x) for x in depths])
    pen = d > 0
    ave = float(d[pen].mean()) * 1e3 if pen.any() else 0.0
    mx = float(d.max()) * 1e3 if len(d) else 0.0
    return PenetrationReport(ave_p=ave, max_p=max(mx, 0.0), penetrating_vertex_count=int(pen.sum()))


def penetration_metrics(mesh, config: GridConfig = GridConfig()) -> PenetrationReport:
    """AVE-P (mean over penetrating vertices) and MAX-P, millimeters."""
    return depth_report(penetration_depths(mesh, config))


# ---------------------------------------------------------------- autograd

class PsiSample(torch.autograd.Function):
    """psi of ``sdf`` at query points, differentiable in the queries and in
    the vertices the grid was built from (grid placement held fixed)."""

    @staticmethod
    def forward(ctx, points, vertices, sdf):
        psi, st = sdf.sample(points.detach().numpy(), with_grad=True)
        ctx.sdf = sdf
        ctx.st = st
        return torch.from_numpy(psi)

    @staticmethod
    def backward(ctx, grad):
        g = grad.detach().numpy()
        st, sdf = ctx.st, ctx.sdf
        gp = gv = None
        if ctx.needs_input_grad[0]:
            dq = (st["dw"] * st["vals"][:, :, None]).sum(1)
            gp = torch.from_numpy(g[:, None] * dq)
        if ctx.needs_input_grad[1]:
            coeff = (g[:, None] * st["w"]).ravel()
            flat = st["corners"].ravel()
            gv = torch.from_numpy(sdf.vertex_gradient((flat, coeff)))
        return gp, gv, None


def psi_torch(points, vertices, faces, config: GridConfig):
    """Differentiable psi of the mesh (vertices, faces) at points, same frame."""
    sdf = mesh_sdf(vertices.detach().numpy(), faces, config)
    return PsiSample.apply(points, vertices, sdf)


# ---------------------------------------------------------------- grid dumps

def save_grid(path, sdf: VoxelSdf):
    """Binary dump: magic, N (u64), origin (3 f64), cell (f64), N^3 f64 values, little endian, C order."""
    from .scene_io import atomic_write_bytes
    head = GRID_MAGIC + struct.pack("<Q3dd", sdf.resolution, *map(float, sdf.origin), float(sdf.cell_size))
    atomic_write_bytes(path, head + np.ascontiguousarray(sdf.values, dtype="<f8").tobytes())


def load_grid(path) -> VoxelSdf:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != GRID_MAGIC:
        raise ValueError(f"{path}: bad grid magic")
    n, ox, oy, oz, cell = struct.unpack_from("<Q3dd", data, 8)
    vals = np.frombuffer(data, dtype="<f8", offset=8 + 40)
    if vals.size != n ** 3:
        raise ValueError(f"{path}: expected {n ** 3} values, found {vals.size}")
    return VoxelSdf(int(n), np.array([ox, oy, oz]), cell, vals.reshape(n, n, n).astype(np.float64))
