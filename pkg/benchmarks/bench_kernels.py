"""Compiled vs pure-Python kernel timings on a posed hand.

    python3 benchmarks/bench_kernels.py [--repeat R] [--grid N]

Times the two hot loops of SDF construction (scanline winding and
closest-point queries) plus one full lazy ``MeshSdf`` sample, once per
available backend, and prints the speedup of the compiled core.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from handrefine import kernels
from handrefine.kinematics import TwoHandParams, forward
from handrefine.sdf import GridConfig, grid_geometry
from handrefine.template import default_template


def _best(fn, repeat):
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return min(ts)


def kernel_times(repeat, n):
    tpl = default_template()
    m = forward(tpl, TwoHandParams(right_fingers=np.full((15, 3), 0.2)))
    v, f = m.right_vertices, m.faces
    tris = np.ascontiguousarray(v[f])
    origin, cell = grid_geometry(v, GridConfig(n))
    q = np.ascontiguousarray(np.random.default_rng(0).uniform(v.min(0), v.max(0), (2000, 3)))
    out = {}
    for name, be in kernels.backends().items():
        out[name] = {
            "winding_axis": _best(lambda: be.winding_axis(tris, origin, cell, n, n, n, 2), repeat),
            "closest_points(2000)": _best(lambda: be.closest_points(q, tris), repeat),
        }
    return out


def sdf_time(pure, n, repeat):
    """Lazy SDF build + sample of the other hand, in a fresh interpreter so the backend switch applies."""
    code = ("import time; from handrefine.template import default_template;"
            "from handrefine.kinematics import TwoHandParams, forward;"
            "from handrefine.sdf import GridConfig, MeshSdf; import numpy as np;"
            "t=default_template(); m=forward(t, TwoHandParams(translation=np.array([0.02,0,0])));"
            f"ts=[]\nfor _ in range({repeat}):\n"
            " s=time.perf_counter(); sd=MeshSdf(m.local_vertices('right'), m.faces, GridConfig(%d));"
            " R,t0=m.frame('right'); sd.sample((m.left_vertices-t0)@R); ts.append(time.perf_counter()-s)\n"
            "print(min(ts))") % n
    env = dict(os.environ)
    if pure:
        env["HANDREFINE_PURE_PYTHON"] = "1"
    else:
        env.pop("HANDREFINE_PURE_PYTHON", None)
    r = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    if r.returncode:
        raise RuntimeError(r.stderr)
    return float(r.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--grid", type=int, default=32)
    a = ap.parse_args(argv)
    times = kernel_times(a.repeat, a.grid)
    names = sorted(times)          # compiled, python
    print(f"{'kernel':<24}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for k in times[names[0]]:
        row = [times[n][k] for n in names]
        line = f"{k:<24}" + "".join(f"{t * 1e3:10.2f}ms" for t in row)
        if len(row) > 1:
            line += f"{times['python'][k] / times['compiled'][k]:11.1f}x"
        print(line)
    if "compiled" in names:
        c, p = sdf_time(False, a.grid, a.repeat), sdf_time(True, a.grid, a.repeat)
        print(f"{'MeshSdf build+sample':<24}{c * 1e3:10.2f}ms{p * 1e3:10.2f}ms{p / c:11.1f}x")
    else:
        print("compiled extension not available; only the python backend was timed")


if __name__ == "__main__":
    main()
