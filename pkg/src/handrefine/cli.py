"""Command line interface: ``handrefine {synth,refine,eval,voxelize,export-obj}``.

Exit codes: 0 success, 1 runtime/data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import copy
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import scene_io
from .harness import PRESETS, CorpusSpec, SceneSpec, evaluate, generate_scene, GenerationError
from .kinematics import FACTORS, forward
from .refiner import RefineConfig, factorized_refine
from .scene_io import SceneFileError
from .sdf import GridConfig, MeshSdf, save_grid

log = logging.getLogger("handrefine")

DEFAULTS = {
    "refine": RefineConfig().to_dict(),
    "corpus": {"count": 10, "seed": 0, "presets": ["clasp", "interlace"], "noise_levels_mm": [10.0]},
    "scene": {k: v for k, v in asdict(SceneSpec()).items() if k not in ("seed", "preset", "noise_std_mm")},
}


class CliError(Exception):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = _merge(DEFAULTS, scene_io.load_config(args.config))
    if args.seed is not None:
        cfg["corpus"]["seed"] = args.seed
    if args.grid_res is not None:
        cfg["refine"]["grid"]["resolution"] = args.grid_res
    if args.stage_order is not None:
        cfg["refine"]["stage_order"] = [s.strip() for s in args.stage_order.split(",")]
    if args.noise_std_mm is not None:
        cfg["corpus"]["noise_levels_mm"] = [args.noise_std_mm]
    if getattr(args, "count", None) is not None:
        cfg["corpus"]["count"] = args.count
    if getattr(args, "preset", None):
        cfg["corpus"]["presets"] = list(args.preset)
    return cfg


def refine_config(cfg) -> RefineConfig:
    return RefineConfig.from_dict(cfg["refine"])


def corpus_spec(cfg) -> CorpusSpec:
    c = cfg["corpus"]
    bad = set(c) - {"count", "seed", "presets", "noise_levels_mm"}
    if bad:
        raise ValueError(f"corpus: unknown keys {sorted(bad)}")
    base = scene_io.dataclass_from(SceneSpec, cfg["scene"], "scene")
    return CorpusSpec(count=int(c["count"]), seed=int(c["seed"]), presets=tuple(c["presets"]), base=base,
                      noise_levels_mm=tuple(float(x) for x in c["noise_levels_mm"]))


def _scene_files(paths):
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out += sorted(p.glob("*.json"))
        elif p.exists():
            out.append(p)
        else:
            raise CliError(f"{p}: no such file or directory")
    if not out:
        raise CliError("no scene files given")
    return out


def _out_dir(args, default="."):
    d = Path(args.out or default)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------- synth

def _synth_one(job):
    spec, grid, camera = job
    from .template import default_template
    tpl = default_template()
    try:
        scene = generate_scene(spec, tpl, grid, camera)
    except GenerationError as e:
        return spec, None, str(e)
    return spec, scene, evaluate(scene.initial, scene.gt, tpl, grid)


def cmd_synth(args, cfg):
    corpus = corpus_spec(cfg)
    rc = refine_config(cfg)
    out = _out_dir(args)
    jobs = [(corpus.scene_spec(i, n), rc.grid, rc.camera)
            for n in corpus.noise_levels_mm for i in range(corpus.count)]
    results = _map(_synth_one, jobs, args.workers)
    rows = []
    for k, (spec, scene, res) in enumerate(results):
        name = f"scene_{k:04d}.json"
        if scene is None:
            rows.append({"scene": name, "seed": spec.seed, "failed": res})
            continue
        scene_io.save_scene(out / "scenes" / name, scene)
        rows.append({"scene": name, "seed": spec.seed, "preset": spec.preset,
                     "noise_std_mm": spec.noise_std_mm, "initial": res})
    report = {"command": "synth", "resolved_config": cfg, "scenes": rows,
              "means": _means(rows, ("initial",)),
              "note": "perturbation scales are harness conventions, not measured CNN error statistics"}
    scene_io.save_json(out / "corpus.json", report)
    print(f"wrote {sum('failed' not in r for r in rows)} scenes to {out / 'scenes'} "
          f"({sum('failed' in r for r in rows)} generation failures)")
    return 0


def _means(rows, phases):
    ok = [r for r in rows if "failed" not in r and all(p in r for p in phases)]
    if not ok:
        return {}
    return {p: {m: float(np.mean([r[p][m] for r in ok])) for m in ok[0][phases[0]]} for p in phases}


def _map(fn, jobs, workers):
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


# ---------------------------------------------------------------- refine

def _refine_one(job):
    path, rc, out, export = job
    scene, tpl = scene_io.load_scene_with_template(path)
    refined, report = factorized_refine(scene.initial, scene.targets, tpl, rc)
    stem = Path(path).stem
    new = replace(scene, initial=refined)
    scene_io.save_scene(out / f"{stem}.refined.json", new, tpl,
                        extra={"refined_from": scene_io.params_to_dict(scene.initial)})
    rep = report.to_dict()
    rep["scene"] = str(path)
    if scene.gt is not None:
        rep["metrics"] = {"initial": evaluate(scene.initial, scene.gt, tpl, rc.grid),
                          "refined": evaluate(refined, scene.gt, tpl, rc.grid)}
    if export:
        scene_io.export_obj(forward(tpl, scene.initial), out / f"{stem}.before.obj")
        scene_io.export_obj(forward(tpl, refined), out / f"{stem}.after.obj")
    return rep


def cmd_refine(args, cfg):
    rc = refine_config(cfg)
    out = _out_dir(args)
    files = _scene_files(args.scenes)
    reps = _map(_refine_one, [(f, rc, out, args.export_obj) for f in files], args.workers)
    for f, rep in zip(files, reps):
        rep["resolved_config"] = cfg
        scene_io.save_json(out / f"{Path(f).stem}.report.json", rep)
        acc = [s["factor"] for s in rep["stages"] if s["accepted"]]
        print(f"{f}: e_col {rep['initial']['e_col']:.6g} -> {rep['final']['e_col']:.6g}, "
              f"e_3d {rep['initial']['e_3d']:.6g} -> {rep['final']['e_3d']:.6g}, accepted {acc}")
    return 0


# ---------------------------------------------------------------- eval

COLUMNS = ("mpjpe", "i_mpjpe", "ave_p", "max_p")


def cmd_eval(args, cfg):
    rc = refine_config(cfg)
    files = _scene_files(args.scenes)
    gt_scene = scene_io.load_scene(args.gt) if args.gt else None
    rows = []
    for f in files:
        scene, tpl = scene_io.load_scene_with_template(f)
        gt = (gt_scene or scene).gt
        if gt is None:
            raise CliError(f"{f}: gt: missing (no ground truth in the scene and no --gt given)")
        rows.append({"scene": str(f), **evaluate(scene.initial, gt, tpl, rc.grid)})
    means = {c: float(np.mean([r[c] for r in rows])) for c in COLUMNS}
    print("scene".ljust(40) + "".join(c.upper().rjust(10) for c in COLUMNS))
    for r in rows + [{"scene": "MEAN", **means}]:
        print(str(r["scene"])[-40:].ljust(40) + "".join(f"{r[c]:10.3f}" for c in COLUMNS))
    if args.out:
        scene_io.save_json(_out_dir(args) / "eval.json",
                           {"command": "eval", "units": "mm", "rows": rows, "means": means,
                            "resolved_config": cfg})
    return 0


# ---------------------------------------------------------------- voxelize / export

def cmd_voxelize(args, cfg):
    rc = refine_config(cfg)
    scene, tpl = scene_io.load_scene_with_template(args.scene)
    params = _which(scene, args.which, args.scene)
    mesh = forward(tpl, params)
    out = _out_dir(args)
    for hand in (("left", "right") if args.hand == "both" else (args.hand,)):
        grid = MeshSdf(mesh.local_vertices(hand), mesh.faces, rc.grid).dense()
        path = out / f"{Path(args.scene).stem}.{args.which}.{hand}.psigrid"
        save_grid(path, grid)
        print(f"wrote {path} (N={grid.resolution}, cell={grid.cell_size:.6g} m, hand frame)")
    return 0


def cmd_export(args, cfg):
    scene, tpl = scene_io.load_scene_with_template(args.scene)
    params = _which(scene, args.which, args.scene)
    path = _out_dir(args) / f"{Path(args.scene).stem}.{args.which}.obj"
    scene_io.export_obj(forward(tpl, params), path)
    print(f"wrote {path}")
    return 0


def _which(scene, which, path):
    p = scene.gt if which == "gt" else scene.initial
    if p is None:
        raise CliError(f"{path}: {which}: missing")
    return p


# ---------------------------------------------------------------- parser

def _u64(s):
    v = int(s, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _grid(s):
    v = int(s)
    if v < 8:
        raise argparse.ArgumentTypeError("grid resolution must be >= 8")
    return v


def _order(s):
    parts = [p.strip() for p in s.split(",")]
    if sorted(parts) != sorted(FACTORS):
        raise argparse.ArgumentTypeError(f"stage order must be a comma-separated permutation of {','.join(FACTORS)}")
    return s


def _nonneg(s):
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", metavar="PATH",
                   help=f"JSON config with sections refine/corpus/scene (default: "
                        f"${scene_io.CONFIG_DIR_ENV}/default.json if present, else built-in defaults)")
    g.add_argument("--seed", type=_u64, metavar="U64", help="corpus seed (default 0)")
    g.add_argument("--grid-res", type=_grid, metavar="N", help="SDF grid resolution N_p (default 32)")
    g.add_argument("--stage-order", type=_order, metavar="PERM",
                   help="refinement stage order, e.g. tau,phi,theta,beta (the default)")
    g.add_argument("--out", metavar="DIR", help="output directory (default: current directory)")
    g.add_argument("--noise-std-mm", type=_nonneg, metavar="R",
                   help="joint noise std of synthetic targets in mm (default 10)")
    g.add_argument("--workers", type=int, default=1, metavar="K", help="worker processes (default 1)")
    g.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="handrefine", description="Collision-aware two-hand refinement.")
    sub = p.add_subparsers(dest="cmd", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scene corpus")
    s.add_argument("--count", type=int, metavar="K", help="scenes per noise level (default 10)")
    s.add_argument("--preset", action="append", choices=PRESETS,
                   help="interaction preset, repeatable (default clasp and interlace)")
    s.set_defaults(fn=cmd_synth)

    r = sub.add_parser("refine", parents=[common], help="refine scene files")
    r.add_argument("scenes", nargs="+", help="scene files or directories")
    r.add_argument("--export-obj", action="store_true", help="also write before/after OBJ meshes")
    r.set_defaults(fn=cmd_refine)

    e = sub.add_parser("eval", parents=[common], help="metric table of scene estimates vs ground truth")
    e.add_argument("scenes", nargs="+", help="scene files or directories (their 'initial' is evaluated)")
    e.add_argument("--gt", metavar="FILE", help="take ground truth from this scene file")
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("voxelize", parents=[common], help="dump psi grids of a scene's hands")
    v.add_argument("scene")
    v.add_argument("--hand", choices=("left", "right", "both"), default="both")
    v.add_argument("--which", choices=("initial", "gt"), default="initial")
    v.set_defaults(fn=cmd_voxelize)

    x = sub.add_parser("export-obj", parents=[common], help="write a scene's meshes as OBJ")
    x.add_argument("scene")
    x.add_argument("--which", choices=("initial", "gt"), default="initial")
    x.set_defaults(fn=cmd_export)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        refine_config(cfg)            # validate early
        GridConfig(**cfg["refine"]["grid"])
        return args.fn(args, cfg)
    except (CliError, SceneFileError, ValueError, KeyError, OSError) as e:
        print(f"handrefine {args.cmd}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
