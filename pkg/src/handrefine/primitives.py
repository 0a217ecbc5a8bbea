"""Closed test meshes: boxes and icospheres."""
import numpy as np


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    c = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    v = lo + c * (hi - lo)
    # outward-facing triangles, two per side
    f = np.array([
        [0, 1, 3], [0, 3, 2],   # x = lo
        [4, 6, 7], [4, 7, 5],   # x = hi
        [0, 4, 5], [0, 5, 1],   # y = lo
        [2, 3, 7], [2, 7, 6],   # y = hi
        [0, 2, 6], [0, 6, 4],   # z = lo
        [1, 5, 7], [1, 7, 3],   # z = hi
    ])
    return v, f


def icosphere(subdivisions=4, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron; 4 subdivisions give 2562 vertices."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
         (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        mid = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in mid:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                mid[key] = len(verts) - 1
            return mid[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return np.array(verts) * radius + np.asarray(center, float), np.array(f, dtype=np.int64)
