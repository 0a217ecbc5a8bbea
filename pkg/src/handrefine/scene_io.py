"""Scene, report and config files; OBJ export.

Scenes are JSON documents.  Floats are written with ``repr`` so every
value round-trips bit for bit.  All writes go through a temporary file
in the target directory followed by an atomic rename.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

SCENE_FORMAT = "handrefine-scene"
SCENE_VERSION = 1
CONFIG_DIR_ENV = "HANDREFINE_CONFIG_DIR"

_PARAM_FIELDS = {"left_shape": 10, "right_shape": 10, "left_orient": 3, "right_orient": 3,
                 "left_fingers": 45, "right_fingers": 45, "translation": 3}
_TARGET_FIELDS = {"joints_3d": (42, 3), "joints_2d": (42, 2), "visibility": (42,),
                  "translation_target": (3,)}


class SceneFileError(ValueError):
    pass


class SceneFormatError(SceneFileError):
    """Malformed document or missing field."""


class SceneVersionError(SceneFileError):
    pass


class SceneLengthError(SceneFileError):
    """A numeric field has the wrong number of entries."""


# ---------------------------------------------------------------- writes

def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


def save_json(path, obj):
    atomic_write_bytes(path, dumps(obj).encode())


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


# ---------------------------------------------------------------- scenes

def params_to_dict(p):
    return {k: np.asarray(getattr(p, k)).ravel().tolist() for k in _PARAM_FIELDS}


def params_from_dict(d, where="params"):
    from .kinematics import TwoHandParams
    if not isinstance(d, dict):
        raise SceneFormatError(f"{where}: expected an object")
    kw = {}
    for k, n in _PARAM_FIELDS.items():
        if k not in d:
            raise SceneFormatError(f"{where}.{k}: missing")
        a = _floats(d[k], f"{where}.{k}")
        if a.size != n:
            raise SceneLengthError(f"{where}.{k}: expected {n} values, got {a.size}")
        kw[k] = a
    extra = set(d) - set(_PARAM_FIELDS)
    if extra:
        raise SceneFormatError(f"{where}: unknown fields {sorted(extra)}")
    try:
        return TwoHandParams(**kw)
    except ValueError as e:
        raise SceneFormatError(f"{where}: {e}") from None


def _floats(v, where):
    try:
        a = np.asarray(v, dtype=np.float64).ravel()
    except (TypeError, ValueError):
        raise SceneFormatError(f"{where}: not a numeric array") from None
    if not np.all(np.isfinite(a)):
        raise SceneFormatError(f"{where}: non-finite values")
    return a


def targets_to_dict(t):
    return {"joints_3d": t.joints_3d.tolist(), "joints_2d": t.joints_2d.tolist(),
            "visibility": [bool(v) for v in t.visibility], "translation_target": t.translation_target.tolist()}


def targets_from_dict(d, where="targets"):
    from .objectives import JointTargets
    if not isinstance(d, dict):
        raise SceneFormatError(f"{where}: expected an object")
    arrays = {}
    for k, shape in _TARGET_FIELDS.items():
        if k not in d:
            raise SceneFormatError(f"{where}.{k}: missing")
        if k == "visibility":
            v = d[k]
            if not isinstance(v, list) or not all(isinstance(b, bool) for b in v):
                raise SceneFormatError(f"{where}.visibility: expected a list of booleans")
            a = np.array(v, dtype=bool)
        else:
            a = _floats(d[k], f"{where}.{k}")
            if isinstance(d[k], list) and len(d[k]) != shape[0]:
                raise SceneLengthError(f"{where}.{k}: expected {shape[0]} rows, got {len(d[k])}")
        if a.size != int(np.prod(shape)):
            raise SceneLengthError(f"{where}.{k}: expected {int(np.prod(shape))} values, got {a.size}")
        arrays[k] = a.reshape(shape)
    try:
        return JointTargets(**arrays)
    except ValueError as e:
        raise SceneFormatError(f"{where}: {e}") from None


def scene_to_dict(scene, template=None, extra=None):
    from .template import default_template
    template = template or default_template()
    doc = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "template": {"config": asdict(template.config), "fingerprint": template.fingerprint()},
        "initial": params_to_dict(scene.initial),
        "targets": targets_to_dict(scene.targets),
    }
    if scene.gt is not None:
        doc["gt"] = params_to_dict(scene.gt)
    if scene.spec is not None:
        doc["provenance"] = asdict(scene.spec)
    if extra:
        doc.update(extra)
    return doc


def save_scene(path, scene, template=None, extra=None):
    save_json(path, scene_to_dict(scene, template, extra))


def scene_from_dict(doc, check_template=True):
    """(Scene, template) from a parsed document."""
    from .harness import Scene, SceneSpec
    from .template import TemplateConfig, template_for
    if not isinstance(doc, dict):
        raise SceneFormatError("scene document must be a JSON object")
    if doc.get("format") != SCENE_FORMAT:
        raise SceneFormatError(f"format: expected {SCENE_FORMAT!r}, got {doc.get('format')!r}")
    if "version" not in doc:
        raise SceneFormatError("version: missing")
    if doc["version"] != SCENE_VERSION:
        raise SceneVersionError(f"version: unsupported scene version {doc['version']!r} "
                                f"(this build reads {SCENE_VERSION})")
    for k in ("template", "initial", "targets"):
        if k not in doc:
            raise SceneFormatError(f"{k}: missing")
    tdoc = doc["template"]
    try:
        tpl = template_for(TemplateConfig(**tdoc.get("config", {})))
    except (TypeError, ValueError) as e:
        raise SceneFormatError(f"template.config: {e}") from None
    if check_template and "fingerprint" in tdoc and tdoc["fingerprint"] != tpl.fingerprint():
        raise SceneFormatError("template.fingerprint: does not match the rebuilt template")
    gt = params_from_dict(doc["gt"], "gt") if doc.get("gt") is not None else None
    initial = params_from_dict(doc["initial"], "initial")
    targets = targets_from_dict(doc["targets"])
    spec = None
    if doc.get("provenance") is not None:
        try:
            spec = SceneSpec(**doc["provenance"])
        except (TypeError, ValueError) as e:
            raise SceneFormatError(f"provenance: {e}") from None
    return Scene(gt, initial, targets, spec), tpl


def load_scene_with_template(path, check_template=True):
    """(Scene, template) from a file; the template is rebuilt from the stored config."""
    try:
        with open(path, "rb") as fh:
            doc = json.loads(fh.read().decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise SceneFormatError(f"{path}: not valid JSON ({e})") from None
    return scene_from_dict(doc, check_template)


def load_scene(path, check_template=True):
    return load_scene_with_template(path, check_template)[0]


# ---------------------------------------------------------------- OBJ

def obj_text(mesh) -> str:
    lines = ["# two-hand mesh, meters"]
    offset = 1
    for hand in ("left", "right"):
        v = np.asarray(mesh.vertices(hand))
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{hand} vertices contain NaN/Inf; refusing to export")
        lines.append(f"o {hand}")
        lines.append(f"g {hand}")
        lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in v.tolist()]
        lines += [f"f {a + offset} {b + offset} {c + offset}" for a, b, c in np.asarray(mesh.faces).tolist()]
        offset += len(v)
    return "\n".join(lines) + "\n"


def export_obj(mesh, path):
    """Write both hands as OBJ groups ``left`` and ``right``."""
    atomic_write_bytes(path, obj_text(mesh).encode())


# ---------------------------------------------------------------- configs

def config_dir():
    d = os.environ.get(CONFIG_DIR_ENV)
    return Path(d) if d else None


def resolve_config_path(name):
    """Path as given if it exists, else looked up in the default config directory."""
    p = Path(name)
    if p.exists():
        return p
    d = config_dir()
    if d is not None and (d / name).exists():
        return d / name
    raise FileNotFoundError(f"config file {name!r} not found"
                            + (f" (also looked in ${CONFIG_DIR_ENV}={d})" if d else ""))


def load_config(path=None) -> dict:
    """Config document (JSON).  Without a path, ``$HANDREFINE_CONFIG_DIR/default.json`` if present."""
    if path is None:
        d = config_dir()
        if d is None or not (d / "default.json").exists():
            return {}
        path = d / "default.json"
    else:
        path = resolve_config_path(path)
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: config is not valid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    bad = set(doc) - {"refine", "corpus", "scene", "template"}
    if bad:
        raise ValueError(f"{path}: unknown config sections {sorted(bad)}")
    return doc


def dataclass_from(cls, d, where):
    names = {f.name for f in fields(cls)}
    bad = set(d or {}) - names
    if bad:
        raise ValueError(f"{where}: unknown keys {sorted(bad)}")
    return cls(**(d or {}))
