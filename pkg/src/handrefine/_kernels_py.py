"""Pure numpy versions of the voxelization kernels (same contracts as _kernels.pyx)."""
import numpy as np

_TINY = 1e-300


def _edge(p, q, x, y):
    """Canonical-orientation edge function with symbolic tie breaking; p, q: (..., 2)."""
    px, py, qx, qy = p[..., 0], p[..., 1], q[..., 0], q[..., 1]
    keep = (px < qx) | ((px == qx) & (py < qy))
    ux = np.where(keep, px, qx)
    uy = np.where(keep, py, qy)
    vx = np.where(keep, qx, px)
    vy = np.where(keep, qy, py)
    flip = np.where(keep, 1.0, -1.0)
    e = (vx - ux) * (y - uy) - (vy - uy) * (x - ux)
    tie = np.where(vy - uy > 0.0, -_TINY, _TINY)
    return flip * np.where(e != 0.0, e, tie)


def winding_axis(tris, origin, cell, nx, ny, nz, axis):
    n = (nx, ny, nz)
    a, b = (axis + 1) % 3, (axis + 2) % 3
    tris = np.asarray(tris, dtype=np.float64)
    D = np.zeros(n, dtype=np.int32)
    if len(tris):
        ia0 = np.maximum(np.ceil((tris[:, :, a].min(1) - origin[a]) / cell).astype(np.int64), 0)
        ia1 = np.minimum(np.floor((tris[:, :, a].max(1) - origin[a]) / cell).astype(np.int64), n[a] - 1)
        ib0 = np.maximum(np.ceil((tris[:, :, b].min(1) - origin[b]) / cell).astype(np.int64), 0)
        ib1 = np.minimum(np.floor((tris[:, :, b].max(1) - origin[b]) / cell).astype(np.int64), n[b] - 1)
        na = np.maximum(ia1 - ia0 + 1, 0)
        nb = np.maximum(ib1 - ib0 + 1, 0)
        cnt = na * nb
        f = np.repeat(np.arange(len(tris)), cnt)
        if len(f):
            # enumerate the (column a, column b) grid of every face's bbox
            local = np.arange(len(f)) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            nbf = nb[f]
            ia = ia0[f] + local // nbf
            ib = ib0[f] + local % nbf
            qx = origin[a] + ia * cell
            qy = origin[b] + ib * cell
            P = tris[f][:, :, [a, b]]
            Z = tris[f][:, :, axis]
            e0 = _edge(P[:, 1], P[:, 2], qx, qy)
            e1 = _edge(P[:, 2], P[:, 0], qx, qy)
            e2 = _edge(P[:, 0], P[:, 1], qx, qy)
            pos = (e0 > 0) & (e1 > 0) & (e2 > 0)
            neg = (e0 < 0) & (e1 < 0) & (e2 < 0)
            s = e0 + e1 + e2
            hit = (pos | neg) & (s != 0.0)
            with np.errstate(invalid="ignore", divide="ignore"):
                depth = (e0 * Z[:, 0] + e1 * Z[:, 1] + e2 * Z[:, 2]) / s
            k = np.ceil((depth - origin[axis]) / cell)
            hit &= k > 0
            k = np.minimum(k[hit], n[axis]).astype(np.int64) - 1
            sgn = np.where(pos[hit], 1, -1).astype(np.int32)
            idx = [None, None, None]
            idx[a], idx[b], idx[axis] = ia[hit], ib[hit], k
            np.add.at(D, tuple(idx), sgn)
    return np.flip(np.cumsum(np.flip(D, axis), axis=axis, dtype=np.int32), axis)


def closest_on_triangles(p, A, B, C):
    """Vectorized closest point of p on triangles ABC -> (dist^2, bary (N, 3))."""
    ab, ac, ap = B - A, C - A, p - A
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - B
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - C
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    n = len(p)
    w = np.empty((n, 3))
    done = np.zeros(n, dtype=bool)

    def put(mask, wa, wb, wc):
        m = mask & ~done
        w[m, 0] = wa[m] if np.ndim(wa) else wa
        w[m, 1] = wb[m] if np.ndim(wb) else wb
        w[m, 2] = wc[m] if np.ndim(wc) else wc
        done[m] = True

    with np.errstate(invalid="ignore", divide="ignore"):
        put((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        put((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - v, v, 0.0)
        put((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        t = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - t, 0.0, t)
        u = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 0.0, 1.0 - u, u)
        den = 1.0 / (va + vb + vc)
        vv, ww = vb * den, vc * den
        put(np.ones(n, dtype=bool), 1.0 - vv - ww, vv, ww)
    q = w[:, :1] * A + w[:, 1:2] * B + w[:, 2:] * C - p
    return (q * q).sum(-1), w


def closest_points(pts, tris, chunk=4_000_000):
    pts = np.asarray(pts, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.float64)
    Q, F = len(pts), len(tris)
    if F == 0:
        raise ValueError("closest_points needs at least one triangle")
    cen = tris.mean(1)
    rad = np.sqrt(((tris - cen[:, None]) ** 2).sum(-1).max(1))
    dist = np.empty(Q)
    face = np.empty(Q, dtype=np.int64)
    bary = np.empty((Q, 3))
    step = max(1, chunk // F)
    for s in range(0, Q, step):
        p = pts[s:s + step]
        dc = np.sqrt(((p[:, None, :] - cen[None]) ** 2).sum(-1))
        seed = np.argmin(dc, 1)
        best, _ = closest_on_triangles(p, *(tris[seed][:, i] for i in range(3)))
        lb = dc - rad
        qi, fi = np.nonzero((lb <= 0) | (lb * lb <= best[:, None]))
        d2, w = closest_on_triangles(p[qi], *(tris[fi][:, i] for i in range(3)))
        order = np.lexsort((fi, d2, qi))
        qi, fi, d2, w = qi[order], fi[order], d2[order], w[order]
        first = np.ones(len(qi), dtype=bool)
        first[1:] = qi[1:] != qi[:-1]
        dist[s + qi[first]] = np.sqrt(d2[first])
        face[s + qi[first]] = fi[first]
        bary[s + qi[first]] = w[first]
    return dist, face, bary
