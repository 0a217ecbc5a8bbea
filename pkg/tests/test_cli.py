import json
import subprocess
import sys
from pathlib import Path

import pytest

from handrefine import scene_io
from handrefine.cli import main
from handrefine.sdf import load_grid

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CFG = ROOT / "configs" / "default.json"


def _tree(d):
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(Path(d).rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--seed", "7", "--count", "2", "--out", str(out)]) == 0
    return out


def test_synth_reproducible(corpus, tmp_path):
    assert main(["synth", "--seed", "7", "--count", "2", "--out", str(tmp_path)]) == 0
    a, b = _tree(corpus), _tree(tmp_path)
    assert len(a) == 3 and a == b


def test_synth_report_has_resolved_config(corpus):
    rep = json.loads((corpus / "corpus.json").read_text())
    assert rep["resolved_config"]["corpus"]["seed"] == 7
    assert rep["resolved_config"]["refine"]["grid"]["resolution"] == 32
    assert len(rep["scenes"]) == 2


def test_refine_with_config(corpus, tmp_path, capsys):
    scene = corpus / "scenes" / "scene_0000.json"
    code = main(["refine", "--config", str(DEFAULT_CFG), str(scene), "--out", str(tmp_path), "--export-obj"])
    assert code == 0
    refined = scene_io.load_scene(tmp_path / "scene_0000.refined.json")
    rep = json.loads((tmp_path / "scene_0000.report.json").read_text())
    assert rep["final"]["e_col"] <= rep["initial"]["e_col"]
    assert rep["final"]["e_3d"] <= rep["initial"]["e_3d"]
    assert rep["resolved_config"] == json.loads(DEFAULT_CFG.read_text())
    assert refined.gt == scene_io.load_scene(scene).gt
    assert (tmp_path / "scene_0000.before.obj").exists() and (tmp_path / "scene_0000.after.obj").exists()
    assert "e_col" in capsys.readouterr().out


def test_refine_stage_order_and_grid_flags(corpus, tmp_path):
    scene = corpus / "scenes" / "scene_0001.json"
    assert main(["refine", str(scene), "--out", str(tmp_path), "--stage-order", "beta,theta,phi,tau",
                 "--grid-res", "16"]) == 0
    rep = json.loads((tmp_path / "scene_0001.report.json").read_text())
    assert [s["factor"] for s in rep["stages"]] == ["beta", "theta", "phi", "tau"]
    assert rep["resolved_config"]["refine"]["grid"]["resolution"] == 16


def test_eval_mismatched_joint_count(corpus, tmp_path, capsys):
    doc = json.loads((corpus / "scenes" / "scene_0000.json").read_text())
    doc["targets"]["joints_3d"] = doc["targets"]["joints_3d"][:21]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["eval", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "targets.joints_3d" in err and "expected 42 rows" in err


def test_eval_table(corpus, tmp_path, capsys):
    assert main(["eval", str(corpus / "scenes"), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "I_MPJPE" in out and "MEAN" in out
    rep = json.loads((tmp_path / "eval.json").read_text())
    assert len(rep["rows"]) == 2 and rep["units"] == "mm"


def test_eval_without_gt(tmp_path, capsys):
    fixture = ROOT / "tests" / "fixtures" / "hand_edited_scene.json"
    assert main(["eval", str(fixture)]) == 1
    assert "gt: missing" in capsys.readouterr().err


def test_voxelize(corpus, tmp_path):
    scene = corpus / "scenes" / "scene_0000.json"
    assert main(["voxelize", str(scene), "--grid-res", "16", "--hand", "right", "--out", str(tmp_path)]) == 0
    g = load_grid(tmp_path / "scene_0000.initial.right.psigrid")
    assert g.resolution == 16 and g.values.max() > 0 and g.values.min() == 0


def test_export_obj(corpus, tmp_path):
    scene = corpus / "scenes" / "scene_0000.json"
    assert main(["export-obj", str(scene), "--which", "gt", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "scene_0000.gt.obj").read_text()
    assert text.count("\nv ") == 2 * 778


def test_missing_file(tmp_path, capsys):
    assert main(["refine", str(tmp_path / "nope.json")]) == 1
    assert "no such file" in capsys.readouterr().err


def test_bad_config_section(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"refine": {"no_such_knob": 1}}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "no_such_knob" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["synth", "--no-such-flag"],
    ["synth", "--seed", "-3"],
    ["synth", "--stage-order", "tau,tau,phi,beta"],
    ["synth", "--grid-res", "1"],
    [],
])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 2


def test_help_documents_defaults(capsys):
    with pytest.raises(SystemExit) as e:
        main(["synth", "--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--config", "--seed", "--grid-res", "--stage-order", "--out", "--noise-std-mm"):
        assert flag in out
    assert "default 32" in out


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "handrefine.cli", "synth", "--count", "1", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "corpus.json").exists()
