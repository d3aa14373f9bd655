import json
import subprocess
import sys

import pytest

from cbf_forge import persistence as store
from cbf_forge.cli import (
    EXIT_ARTIFACT,
    EXIT_CONFIG,
    EXIT_ESCAPE,
    EXIT_INFEASIBLE,
    EXIT_OK,
    main,
)

FAST = {"training": {"iterations": 200}, "collocation": {"count": 512, "boundary_count": 64},
        "audit_resolution": 60, "boundary": {"count": 400}}


@pytest.fixture(scope="module")
def fast_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "fast.json"
    p.write_text(json.dumps(FAST))
    return p


@pytest.fixture(scope="module")
def synthesized(tmp_path_factory, fast_config):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synthesize", "--preset", "halfspace", "--config", str(fast_config), "--out", str(out)]) == EXIT_OK
    return out


def test_synthesize_writes_artifacts(synthesized):
    man = store.load(synthesized / "manifest.json", store.KIND_MANIFEST).payload
    assert len(man["models"]) == 1
    for entry in man["models"]:
        assert store.load(synthesized / entry["file"], store.KIND_MODEL).hash == entry["hash"]
        assert (synthesized / entry["design_file"]).exists()
    assert (synthesized / "partition.json").exists() and (synthesized / "synthesis_summary.json").exists()


def test_analyze_desired_and_manifest(tmp_path, synthesized, fast_config):
    assert main(["analyze", "--preset", "ellipsoid", "--out", str(tmp_path / "a")]) == EXIT_OK
    rep = store.load(tmp_path / "a" / "inactivity_desired.json").payload
    assert "boundary" in rep["classification"]
    assert main(["analyze", "--preset", "halfspace", "--config", str(fast_config), "--out", str(tmp_path / "b"),
                 "--manifest", str(synthesized / "manifest.json"), "--resolution", "60"]) == EXIT_OK
    rep = store.load(tmp_path / "b" / "inactivity_h_1.json").payload
    assert rep["points"] == []


def test_simulate_modes(tmp_path, synthesized, fast_config):
    base = ["simulate", "--preset", "halfspace", "--config", str(fast_config), "--out", str(tmp_path)]
    assert main(base + ["--manifest", str(synthesized / "manifest.json")]) == EXIT_OK
    assert main(base + ["--filter", "single"]) == EXIT_OK
    metrics = json.loads((tmp_path / "metrics_multi.json").read_text())
    assert metrics["min_h_desired"] >= 0 and not metrics["escaped"]
    assert (tmp_path / "trace_single.csv").read_text().startswith("t,x0,x1,u_nom,u_filt,status,h_des,h_1")


def test_simulate_escape_exit_code(tmp_path):
    assert main(["simulate", "--preset", "halfspace", "--filter", "none", "--out", str(tmp_path)]) == EXIT_ESCAPE


def test_compare_and_export(tmp_path, synthesized, fast_config):
    assert main(["compare", "--preset", "halfspace", "--config", str(fast_config), "--out", str(tmp_path / "c"),
                 "--manifest", str(synthesized / "manifest.json")]) == EXIT_OK
    rep = json.loads((tmp_path / "c" / "compare_metrics.json").read_text())
    assert {"single", "multi", "chattering_ratio"} <= set(rep)
    for name in ("input.dat", "h.dat", "phase_multi.dat", "boundary.dat", "zero_locus.dat", "compare.gp"):
        assert (tmp_path / "c" / name).exists()
    assert main(["export", "--manifest", str(synthesized / "manifest.json"), "--out", str(tmp_path / "e"),
                 "--resolution", "21"]) == EXIT_OK
    lines = [ln for ln in (tmp_path / "e" / "cbf_grid.dat").read_text().splitlines() if ln and ln[0] != "#"]
    assert len(lines) == 21 * 21


def test_config_errors(tmp_path, capsys):
    assert main(["synthesize", "--out", str(tmp_path)]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["synthesize", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["synthesize", "--preset", "halfspace", "--seed", "-3", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["export", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_tampered_model_is_rejected(tmp_path, synthesized, fast_config):
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(synthesized, copy)
    model = copy / "models" / "h_01.json"
    doc = json.loads(model.read_text())
    doc["payload"]["biases"][-1][0] += 1.0
    model.write_text(json.dumps(doc))
    code = main(["simulate", "--preset", "halfspace", "--config", str(fast_config), "--out", str(tmp_path / "s"),
                 "--manifest", str(copy / "manifest.json")])
    assert code == EXIT_ARTIFACT


def test_infeasible_design_exit_code(tmp_path, fast_config):
    cfg = dict(FAST, design={"theta_init": 1e-6, "theta_max": 1e-6, "epsilon": 50.0})
    p = tmp_path / "tight.json"
    p.write_text(json.dumps(cfg))
    code = main(["synthesize", "--preset", "ellipsoid", "--config", str(p), "--out", str(tmp_path / "x")])
    assert code == EXIT_INFEASIBLE


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "cbf_forge", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "cbf-forge" in out.stdout
