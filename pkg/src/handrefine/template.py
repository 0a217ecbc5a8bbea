"""Procedural two-hand template standing in for the learned MANO asset.

Each of the 16 bones (palm + 3 per finger) is a closed capsule; the hand
is their union.  Rest vertex positions are an exact affine function of
the 10 shape coefficients (bone length/width scalings), so the template
ships the same arrays a MANO-style layer would: a rest mesh, linear
shape directions, skinning weights and a keypoint regressor.

Conventions (right hand, meters): wrist at the origin, fingers along +y,
palm facing -z, thumb on the -x side.  The left hand is the mirror image
in x.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

N_BONES = 16
N_KEYPOINTS = 21
N_SHAPE = 10
FINGERS = ("thumb", "index", "middle", "ring", "pinky")

# parent of each bone; bone 1 + 3*f + j is joint j of finger f
PARENTS = np.array([-1] + [0 if j == 0 else 1 + 3 * f + j - 1
                           for f in range(5) for j in range(3)])
TIP_KEYPOINTS = np.arange(16, 21)
PALM_KEYPOINTS = np.array([0, 1, 4, 7, 10, 13])  # wrist + finger bases


def finger_chain(f):
    """Keypoint indices of finger f ordered tip -> base (p_a .. p_d)."""
    return np.array([16 + f, 3 + 3 * f, 2 + 3 * f, 1 + 3 * f])


# rest skeleton of the right hand
_BASES = np.array([
    [-0.022, 0.022, -0.006],
    [-0.026, 0.088, 0.000],
    [-0.006, 0.092, 0.000],
    [0.013, 0.087, 0.000],
    [0.030, 0.078, 0.000],
])
_DIRS = np.array([
    [-0.55, 0.83, -0.10],
    [-0.08, 1.00, 0.00],
    [0.00, 1.00, 0.00],
    [0.06, 1.00, 0.00],
    [0.14, 1.00, 0.00],
])
_LENGTHS = np.array([
    [0.040, 0.032, 0.026],
    [0.040, 0.025, 0.019],
    [0.045, 0.029, 0.021],
    [0.042, 0.027, 0.020],
    [0.033, 0.020, 0.018],
])
_RADII = np.array([
    [0.0110, 0.0100, 0.0090],
    [0.0090, 0.0082, 0.0075],
    [0.0092, 0.0085, 0.0077],
    [0.0088, 0.0080, 0.0073],
    [0.0080, 0.0072, 0.0066],
])
_PALM_LENGTH = 0.075
_PALM_RADII = (0.036, 0.013)  # half-width (x), half-thickness (z)
_PALM_CAP = 0.016

# skinning blend half-width as a fraction of bone length
_BLEND = 0.3


@dataclass(frozen=True)
class TemplateConfig:
    vertex_budget: int = 778
    length_scale: float = 1.0
    width_scale: float = 1.0
    length_range: float = 0.20   # max |relative length change| for beta in [-1, 1]^10
    width_range: float = 0.30

    def validate(self):
        if self.vertex_budget < 100:
            raise ValueError(f"vertex_budget must be >= 100, got {self.vertex_budget}")
        for name in ("length_scale", "width_scale", "length_range", "width_range"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True, eq=False)
class HandTemplate:
    """Right-hand rest data; :meth:`side` gives the mirrored left variant."""
    config: TemplateConfig
    rest_vertices: np.ndarray      # (V, 3)
    shape_dirs: np.ndarray         # (V, 3, 10)
    faces: np.ndarray              # (F, 3) int
    face_bone: np.ndarray          # (F,) capsule each face belongs to
    rest_joints: np.ndarray        # (16, 3) pivots
    joint_shape_dirs: np.ndarray   # (16, 3, 10)
    parents: np.ndarray            # (16,)
    skin_weights: np.ndarray       # (V, 16)
    joint_regressor: np.ndarray    # (21, V)
    shape_basis: np.ndarray        # (16, 2, 10): per-bone (length, width) deltas
    _mirror: dict = field(default_factory=dict, repr=False)

    @property
    def n_vertices(self):
        return self.rest_vertices.shape[0]

    def side(self, hand):
        """(rest_vertices, shape_dirs, rest_joints, joint_shape_dirs) for a hand."""
        if hand == "right":
            return self.rest_vertices, self.shape_dirs, self.rest_joints, self.joint_shape_dirs
        if hand != "left":
            raise ValueError(f"unknown hand {hand!r}")
        if "left" not in self._mirror:
            m = np.array([-1.0, 1.0, 1.0])
            self._mirror["left"] = (
                self.rest_vertices * m,
                self.shape_dirs * m[:, None],
                self.rest_joints * m,
                self.joint_shape_dirs * m[:, None],
            )
        return self._mirror["left"]

    def rest_keypoints(self, hand="right", shape=None):
        v, sd, _, _ = self.side(hand)
        if shape is not None:
            v = v + sd @ np.asarray(shape, dtype=np.float64)
        return self.joint_regressor @ v

    def check_invariants(self):
        w = self.skin_weights
        if (w < 0).any() or np.abs(w.sum(1) - 1.0).max() > 1e-9:
            raise ValueError("skin weights are not row-stochastic")
        if np.abs(self.joint_regressor.sum(1) - 1.0).max() > 1e-9:
            raise ValueError("joint regressor rows do not sum to 1")
        if self.faces.min() < 0 or self.faces.max() >= self.n_vertices:
            raise ValueError("face index out of range")
        if not is_watertight(self.faces):
            raise ValueError("template mesh is not watertight")

    def fingerprint(self):
        import hashlib
        h = hashlib.sha256()
        for a in (self.rest_vertices, self.shape_dirs, self.faces, self.skin_weights,
                  self.joint_regressor):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def edge_counts(faces):
    f = np.asarray(faces)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def is_watertight(faces):
    return bool(np.all(edge_counts(faces) == 2))


def _allocate(budget):
    """Ring layout hitting the vertex budget exactly.

    Returns (around_f, cap_f, cyl_f (15,), around_p, cap_p, cyl_p).  A
    capsule with a points per ring, c cap rings per end and n cylinder
    rings has a * (2c + n) + 2 vertices.
    """
    # prefer rounder rings, then rounder caps, then longer cylinders;
    # single-ring (bipyramid) bones only for tiny budgets
    order = [(a, cyl, cap) for cyl_min in (2, 1) for a in range(8, 2, -1)
             for cap in (2, 1, 0) for cyl in range(6, cyl_min - 1, -1)
             if cyl_min == 2 or cyl == 1]
    for around, cyl, cap in order:
        base = around * (2 * cap + cyl) + 2
        for extra in range(15):
            rem = budget - 15 * base - extra * around - 2
            if rem <= 0:
                continue
            for a_p in range(3 * around, around - 1, -1):
                if rem % a_p:
                    continue
                rings = rem // a_p
                cap_p = min(2, (rings - 2) // 2)
                if rings >= 3 and cap_p >= 0 and rings - 2 * cap_p >= 2:
                    cyl_f = np.full(15, cyl)
                    cyl_f[:extra] += 1
                    return around, cap, cyl_f, a_p, cap_p, rings - 2 * cap_p
    raise ValueError(f"cannot lay out a template with {budget} vertices")


def _frame(d):
    d = d / np.linalg.norm(d)
    e2 = np.array([0.0, 0.0, 1.0]) - d[2] * d
    e2 /= np.linalg.norm(e2)
    e1 = np.cross(e2, d)
    return e1, e2, d


def _capsule(around, cap, cyl, length, rx, rz, cap_len, frame):
    """Rings from the start pole to the end pole of one capsule.

    Returns per-vertex (s, cap_offset, radial) in template units plus the
    local faces and the index of the first cylinder ring.
    """
    e1, e2, d = frame
    ang = 2.0 * np.pi * np.arange(around) / around
    circle = np.cos(ang)[:, None] * (rx * e1) + np.sin(ang)[:, None] * (rz * e2)

    rings = []  # (s, cap_offset, radial_scale)
    for m in range(1, cap + 1):
        polar = m * np.pi / (2 * (cap + 1))
        rings.append((0.0, -np.cos(polar) * cap_len, np.sin(polar)))
    first_cyl = len(rings)
    for j in range(cyl):
        rings.append((j / (cyl - 1) if cyl > 1 else 0.0, 0.0, 1.0))
    for m in range(cap, 0, -1):
        polar = m * np.pi / (2 * (cap + 1))
        rings.append((1.0, np.cos(polar) * cap_len, np.sin(polar)))

    s = [0.0]
    off = [-cap_len]
    rad = [np.zeros(3)]
    for (rs, ro, rr) in rings:
        s += [rs] * around
        off += [ro] * around
        rad += list(rr * circle)
    s.append(1.0)
    off.append(cap_len)
    rad.append(np.zeros(3))

    n = 2 + around * len(rings)
    faces = []
    ring_idx = lambda i, k: 1 + i * around + (k % around)
    for k in range(around):
        faces.append((0, ring_idx(0, k + 1), ring_idx(0, k)))
    for i in range(len(rings) - 1):
        for k in range(around):
            a, b = ring_idx(i, k), ring_idx(i, k + 1)
            c, dd = ring_idx(i + 1, k + 1), ring_idx(i + 1, k)
            faces.append((a, b, c))
            faces.append((a, c, dd))
    last = len(rings) - 1
    for k in range(around):
        faces.append((ring_idx(last, k), ring_idx(last, k + 1), n - 1))
    return (np.array(s), np.array(off), np.array(rad), np.array(faces),
            1 + first_cyl * around)


def _shape_basis(cfg):
    """(16, 2, 10) length/width deltas per unit shape coefficient."""
    B = np.zeros((N_BONES, 2, N_SHAPE))
    lr, wr = cfg.length_range, cfg.width_range
    fingers = lambda f: [1 + 3 * f + j for j in range(3)]
    B[:, 0, 0] = lr / 2                        # global length
    B[:, 1, 1] = wr / 2                        # global width
    B[0, 0, 2] = lr / 2                        # palm length
    B[fingers(0), 0, 3] = lr / 2               # thumb length
    B[fingers(1), 0, 4] = lr / 2               # index length
    B[fingers(2), 0, 5] = lr / 2               # middle length
    B[fingers(3) + fingers(4), 0, 6] = lr / 2  # ring + pinky length
    for f in range(1, 5):
        B[fingers(f), 1, 7] = wr / 2           # finger width
    B[fingers(0), 1, 8] = wr / 2               # thumb width
    B[0, 1, 9] = wr / 2                        # palm width
    return B


def build_template(config: TemplateConfig | None = None) -> HandTemplate:
    cfg = config or TemplateConfig()
    cfg.validate()
    around, cap, cyl_f, a_p, cap_p, cyl_p = _allocate(cfg.vertex_budget)
    L, W = cfg.length_scale, cfg.width_scale

    # bone table in template units
    dirs = np.zeros((N_BONES, 3))
    lengths = np.zeros(N_BONES)
    pivots = np.zeros((N_BONES, 3))
    dirs[0] = (0.0, 1.0, 0.0)
    lengths[0] = _PALM_LENGTH * L
    for f in range(5):
        d = _DIRS[f] / np.linalg.norm(_DIRS[f])
        p = _BASES[f] * L
        for j in range(3):
            b = 1 + 3 * f + j
            dirs[b], lengths[b], pivots[b] = d, _LENGTHS[f, j] * L, p
            p = p + d * lengths[b]
    tips = np.array([pivots[3 + 3 * f] + dirs[3 + 3 * f] * (lengths[3 + 3 * f] + _RADII[f, 2] * W)
                     for f in range(5)])

    verts_s, verts_off, verts_rad, verts_bone, faces, face_bone = [], [], [], [], [], []
    ring0 = {}
    n = 0
    for b in range(N_BONES):
        if b == 0:
            # (z, x, y) is right-handed so faces come out consistently oriented
            spec = (a_p, cap_p, cyl_p, lengths[0], _PALM_RADII[1] * W, _PALM_RADII[0] * W,
                    _PALM_CAP * W, (np.array([0, 0, 1.0]), np.array([1.0, 0, 0]), dirs[0]))
        else:
            f, j = divmod(b - 1, 3)
            r = _RADII[f, j] * W
            spec = (around, cap, cyl_f[b - 1], lengths[b], r, r, r, _frame(dirs[b]))
        s, off, rad, fc, first = _capsule(*spec)
        ring0[b] = n + first + np.arange(spec[0])
        verts_s.append(s)
        verts_off.append(off)
        verts_rad.append(rad)
        verts_bone.append(np.full(len(s), b))
        faces.append(fc + n)
        face_bone.append(np.full(len(fc), b))
        n += len(s)
    s = np.concatenate(verts_s)
    off = np.concatenate(verts_off)
    rad = np.concatenate(verts_rad)
    vb = np.concatenate(verts_bone)
    faces = np.concatenate(faces).astype(np.int64)
    face_bone = np.concatenate(face_bone)
    assert n == cfg.vertex_budget

    basis = _shape_basis(cfg)

    def pose_rest(beta):
        ls = 1.0 + basis[:, 0] @ beta
        ws = 1.0 + basis[:, 1] @ beta
        J = np.zeros((N_BONES, 3))
        for b in range(1, N_BONES):
            p = PARENTS[b]
            J[b] = J[p] + ls[p] * ((pivots[b] - pivots[p]) if p > 0 else pivots[b])
        V = (J[vb] + dirs[vb] * (s * lengths[vb] * ls[vb] + off * ws[vb])[:, None]
             + rad * ws[vb][:, None])
        return V, J

    V0, J0 = pose_rest(np.zeros(N_SHAPE))
    sdirs = np.zeros((n, 3, N_SHAPE))
    jdirs = np.zeros((N_BONES, 3, N_SHAPE))
    for i in range(N_SHAPE):
        Vi, Ji = pose_rest(np.eye(N_SHAPE)[i])
        sdirs[:, :, i] = Vi - V0
        jdirs[:, :, i] = Ji - J0

    # skinning: blend with parent/child near the pivots, by axial position
    weights = np.zeros((n, N_BONES))
    t = s + off / lengths[vb]
    for v in range(n):
        b = vb[v]
        if b == 0:
            weights[v, 0] = 1.0
            continue
        wp = np.clip(0.5 - t[v] / (2 * _BLEND), 0.0, 1.0)
        has_child = (b - 1) % 3 < 2
        wc = np.clip(0.5 + (t[v] - 1.0) / (2 * _BLEND), 0.0, 1.0) if has_child else 0.0
        weights[v, PARENTS[b]] = wp
        if has_child:
            weights[v, b + 1] = wc
        weights[v, b] = 1.0 - wp - wc

    reg = np.zeros((N_KEYPOINTS, n))
    for b in range(N_BONES):
        reg[b, ring0[b]] = 1.0 / len(ring0[b])
    offsets = np.cumsum([0] + [len(x) for x in verts_s])
    for f in range(5):
        distal = 3 + 3 * f
        reg[16 + f, offsets[distal + 1] - 1] = 1.0  # end pole
    assert np.allclose(reg[16:] @ V0, tips)

    tpl = HandTemplate(
        config=cfg, rest_vertices=V0, shape_dirs=sdirs, faces=faces, face_bone=face_bone,
        rest_joints=J0, joint_shape_dirs=jdirs, parents=PARENTS.copy(),
        skin_weights=weights, joint_regressor=reg, shape_basis=basis,
    )
    tpl.check_invariants()
    return tpl


_BUILT: dict = {}


def template_for(config: TemplateConfig | None = None) -> HandTemplate:
    """Cached :func:`build_template` (templates are immutable)."""
    config = config or TemplateConfig()
    if config not in _BUILT:
        _BUILT[config] = build_template(config)
    return _BUILT[config]


def default_template():
    return template_for(TemplateConfig())


_ARRAYS = ("rest_vertices", "shape_dirs", "faces", "face_bone", "rest_joints",
           "joint_shape_dirs", "parents", "skin_weights", "joint_regressor", "shape_basis")


def save_template(tpl: HandTemplate, path):
    """Self-describing .npz: every array plus the JSON config."""
    from .scene_io import atomic_write_bytes
    import io
    buf = io.BytesIO()
    np.savez(buf, config=np.array(json.dumps(asdict(tpl.config))),
             format=np.array("handrefine-template/1"),
             **{k: getattr(tpl, k) for k in _ARRAYS})
    atomic_write_bytes(path, buf.getvalue())


def load_template(path) -> HandTemplate:
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != "handrefine-template/1":
            raise ValueError(f"{path}: not a template file")
        cfg = TemplateConfig(**json.loads(str(z["config"])))
        tpl = HandTemplate(config=cfg, **{k: z[k].copy() for k in _ARRAYS})
    tpl.check_invariants()
    return tpl
