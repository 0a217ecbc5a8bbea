"""Kernel backend selection.

The compiled extension is used when it imports; otherwise (or with
``HANDREFINE_PURE_PYTHON=1``) the numpy implementation is used.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
if os.environ.get("HANDREFINE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None
    else:
        BACKEND = "compiled"
else:
    _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py


def winding_axis(tris, origin, cell, shape, axis):
    """Signed crossing count of the +axis ray from each voxel center."""
    tris = np.ascontiguousarray(tris, dtype=np.float64)
    origin = np.ascontiguousarray(origin, dtype=np.float64)
    return _impl.winding_axis(tris, origin, float(cell), int(shape[0]), int(shape[1]),
                              int(shape[2]), int(axis))


def inside_votes(tris, origin, cell, shape):
    """Voxel centers with nonzero winding along at least two of the three axes."""
    tris = np.ascontiguousarray(tris, dtype=np.float64)
    origin = np.ascontiguousarray(origin, dtype=np.float64)
    votes = np.zeros(tuple(int(x) for x in shape), dtype=np.int8)
    for ax in range(3):
        votes += _impl.winding_axis(tris, origin, float(cell), int(shape[0]), int(shape[1]),
                                    int(shape[2]), ax) != 0
    return votes >= 2


def closest_points(pts, tris):
    """(distance, face, barycentric) of the nearest surface point per query."""
    return _impl.closest_points(np.ascontiguousarray(pts, dtype=np.float64),
                                np.ascontiguousarray(tris, dtype=np.float64))


def backends():
    """Available implementations, for benchmarks and cross-checks."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out
