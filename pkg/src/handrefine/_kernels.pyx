# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled voxelization kernels.  Must agree with _kernels_py."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, ceil, floor

cnp.import_array()


cdef inline double _edge(double px, double py, double qx, double qy,
                         double x, double y) nogil:
    # canonical edge orientation makes shared edges give exact negatives;
    # zeros are resolved by a symbolic perturbation of the query point
    cdef double ux, uy, vx, vy, e, dy
    cdef double flip = 1.0
    if px < qx or (px == qx and py < qy):
        ux = px; uy = py; vx = qx; vy = qy
    else:
        ux = qx; uy = qy; vx = px; vy = py
        flip = -1.0
    e = (vx - ux) * (y - uy) - (vy - uy) * (x - ux)
    if e != 0.0:
        return flip * e
    dy = vy - uy
    if dy > 0.0:
        return -flip * 1e-300
    return flip * 1e-300


def winding_axis(double[:, :, ::1] tris, double[::1] origin, double cell,
                 Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz, int axis):
    """Signed crossing counts of +axis rays from every voxel center."""
    cdef Py_ssize_t n[3]
    n[0] = nx; n[1] = ny; n[2] = nz
    cdef int a = (axis + 1) % 3
    cdef int b = (axis + 2) % 3
    cdef cnp.ndarray[cnp.int32_t, ndim=3] D = np.zeros((nx, ny, nz), dtype=np.int32)
    cdef int[:, :, ::1] Dv = D
    cdef Py_ssize_t f, ia, ib, ia0, ia1, ib0, ib1, k
    cdef Py_ssize_t idx[3]
    cdef double x0, y0, x1, y1, x2, y2, z0, z1, z2, qx, qy
    cdef double e0, e1, e2, s, depth, mn, mx
    cdef int sgn
    cdef Py_ssize_t F = tris.shape[0]
    with nogil:
        for f in range(F):
            x0 = tris[f, 0, a]; y0 = tris[f, 0, b]; z0 = tris[f, 0, axis]
            x1 = tris[f, 1, a]; y1 = tris[f, 1, b]; z1 = tris[f, 1, axis]
            x2 = tris[f, 2, a]; y2 = tris[f, 2, b]; z2 = tris[f, 2, axis]
            mn = min(x0, min(x1, x2)); mx = max(x0, max(x1, x2))
            ia0 = <Py_ssize_t>ceil((mn - origin[a]) / cell)
            ia1 = <Py_ssize_t>floor((mx - origin[a]) / cell)
            mn = min(y0, min(y1, y2)); mx = max(y0, max(y1, y2))
            ib0 = <Py_ssize_t>ceil((mn - origin[b]) / cell)
            ib1 = <Py_ssize_t>floor((mx - origin[b]) / cell)
            if ia0 < 0: ia0 = 0
            if ib0 < 0: ib0 = 0
            if ia1 > n[a] - 1: ia1 = n[a] - 1
            if ib1 > n[b] - 1: ib1 = n[b] - 1
            for ia in range(ia0, ia1 + 1):
                qx = origin[a] + ia * cell
                for ib in range(ib0, ib1 + 1):
                    qy = origin[b] + ib * cell
                    e0 = _edge(x1, y1, x2, y2, qx, qy)
                    e1 = _edge(x2, y2, x0, y0, qx, qy)
                    e2 = _edge(x0, y0, x1, y1, qx, qy)
                    if e0 > 0 and e1 > 0 and e2 > 0:
                        sgn = 1
                    elif e0 < 0 and e1 < 0 and e2 < 0:
                        sgn = -1
                    else:
                        continue
                    s = e0 + e1 + e2
                    if s == 0.0:
                        continue
                    depth = (e0 * z0 + e1 * z1 + e2 * z2) / s
                    k = <Py_ssize_t>ceil((depth - origin[axis]) / cell)
                    if k <= 0:
                        continue
                    if k > n[axis]:
                        k = n[axis]
                    idx[a] = ia; idx[b] = ib; idx[axis] = k - 1
                    Dv[idx[0], idx[1], idx[2]] += sgn
    return np.flip(np.cumsum(np.flip(D, axis), axis=axis, dtype=np.int32), axis)


cdef inline void _closest(double px, double py, double pz,
                          double ax, double ay, double az,
                          double bx, double by, double bz,
                          double cx, double cy, double cz,
                          double* out) nogil:
    # closest point on triangle abc; out = (dist^2, wa, wb, wc)
    cdef double abx = bx - ax, aby = by - ay, abz = bz - az
    cdef double acx = cx - ax, acy = cy - ay, acz = cz - az
    cdef double apx = px - ax, apy = py - ay, apz = pz - az
    cdef double d1 = abx * apx + aby * apy + abz * apz
    cdef double d2 = acx * apx + acy * apy + acz * apz
    cdef double wa, wb, wc, d3, d4, d5, d6, va, vb, vc, v, w, den
    cdef double bpx, bpy, bpz, cpx, cpy, cpz, qx, qy, qz
    if d1 <= 0.0 and d2 <= 0.0:
        wa = 1.0; wb = 0.0; wc = 0.0
    else:
        bpx = px - bx; bpy = py - by; bpz = pz - bz
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        if d3 >= 0.0 and d4 <= d3:
            wa = 0.0; wb = 1.0; wc = 0.0
        else:
            vc = d1 * d4 - d3 * d2
            if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                v = d1 / (d1 - d3)
                wa = 1.0 - v; wb = v; wc = 0.0
            else:
                cpx = px - cx; cpy = py - cy; cpz = pz - cz
                d5 = abx * cpx + aby * cpy + abz * cpz
                d6 = acx * cpx + acy * cpy + acz * cpz
                if d6 >= 0.0 and d5 <= d6:
                    wa = 0.0; wb = 0.0; wc = 1.0
                else:
                    vb = d5 * d2 - d1 * d6
                    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                        w = d2 / (d2 - d6)
                        wa = 1.0 - w; wb = 0.0; wc = w
                    else:
                        va = d3 * d6 - d5 * d4
                        if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
                            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                            wa = 0.0; wb = 1.0 - w; wc = w
                        else:
                            den = 1.0 / (va + vb + vc)
                            v = vb * den
                            w = vc * den
                            wa = 1.0 - v - w; wb = v; wc = w
    qx = wa * ax + wb * bx + wc * cx - px
    qy = wa * ay + wb * by + wc * cy - py
    qz = wa * az + wb * bz + wc * cz - pz
    out[0] = qx * qx + qy * qy + qz * qz
    out[1] = wa; out[2] = wb; out[3] = wc


def closest_points(double[:, ::1] pts, double[:, :, ::1] tris):
    """Nearest surface point of a triangle soup for each query point.

    Returns (distance, face index, barycentric weights).  Ties go to
    the lowest face index.
    """
    cdef Py_ssize_t Q = pts.shape[0], F = tris.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dist = np.empty(Q)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] face = np.empty(Q, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] bary = np.empty((Q, 3))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] cen = np.empty((F, 3))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] rad = np.empty(F)
    cdef double[:, ::1] cv = cen
    cdef double[::1] rv = rad
    cdef double[::1] distv = dist
    cdef long long[::1] facev = face
    cdef double[:, ::1] baryv = bary
    cdef Py_ssize_t q, f, j, bf, seed
    cdef double out[4]
    cdef double best, dc, lb, r, dx, dy, dz, bwa, bwb, bwc, dmin
    if F == 0:
        raise ValueError("closest_points needs at least one triangle")
    with nogil:
        for f in range(F):
            for j in range(3):
                cv[f, j] = (tris[f, 0, j] + tris[f, 1, j] + tris[f, 2, j]) / 3.0
            r = 0.0
            for j in range(3):
                dx = tris[f, j, 0] - cv[f, 0]
                dy = tris[f, j, 1] - cv[f, 1]
                dz = tris[f, j, 2] - cv[f, 2]
                r = max(r, dx * dx + dy * dy + dz * dz)
            rv[f] = sqrt(r)
        for q in range(Q):
            # seed the bound with the face whose centroid is nearest
            seed = 0
            dmin = 1e308
            for f in range(F):
                dx = pts[q, 0] - cv[f, 0]
                dy = pts[q, 1] - cv[f, 1]
                dz = pts[q, 2] - cv[f, 2]
                dc = dx * dx + dy * dy + dz * dz
                if dc < dmin:
                    dmin = dc
                    seed = f
            f = seed
            _closest(pts[q, 0], pts[q, 1], pts[q, 2],
                     tris[f, 0, 0], tris[f, 0, 1], tris[f, 0, 2],
                     tris[f, 1, 0], tris[f, 1, 1], tris[f, 1, 2],
                     tris[f, 2, 0], tris[f, 2, 1], tris[f, 2, 2], out)
            best = out[0]; bf = f; bwa = out[1]; bwb = out[2]; bwc = out[3]
            for f in range(F):
                dx = pts[q, 0] - cv[f, 0]
                dy = pts[q, 1] - cv[f, 1]
                dz = pts[q, 2] - cv[f, 2]
                lb = sqrt(dx * dx + dy * dy + dz * dz) - rv[f]
                if lb > 0.0 and lb * lb > best:
                    continue
                _closest(pts[q, 0], pts[q, 1], pts[q, 2],
                         tris[f, 0, 0], tris[f, 0, 1], tris[f, 0, 2],
                         tris[f, 1, 0], tris[f, 1, 1], tris[f, 1, 2],
                         tris[f, 2, 0], tris[f, 2, 1], tris[f, 2, 2], out)
                if out[0] < best or (out[0] == best and f < bf):
                    best = out[0]; bf = f; bwa = out[1]; bwb = out[2]; bwc = out[3]
            distv[q] = sqrt(best)
            facev[q] = bf
            baryv[q, 0] = bwa; baryv[q, 1] = bwb; baryv[q, 2] = bwc
    return dist, face, bary
