import csv
import json
import subprocess
import sys

import pytest

from terrain_nav.cli import main
from terrain_nav.config import AppConfig

PLATE = {
    "name": "plate",
    "spacing": 0.05,
    "primitives": [{"type": "plate", "x": [0, 6], "y": [0, 3], "z": 0.0}],
    "start": [1.0, 1.5],
    "goal": [5.0, 1.5],
}
ISLAND = dict(PLATE, name="island", primitives=[{"type": "plate", "x": [0, 3], "y": [0, 3], "z": 0.0},
                                                {"type": "plate", "x": [4.5, 6], "y": [0, 3], "z": 0.0}])


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def plate_spec(tmp_path):
    return write_json(tmp_path / "plate.json", PLATE)


def test_gen_terrain(tmp_path, plate_spec, capsys):
    assert main(["gen-terrain", plate_spec, "--out", str(tmp_path / "o")]) == 0
    xyz = (tmp_path / "o/plate.xyz").read_text().splitlines()
    assert len(xyz) > 1000
    manifest = json.loads((tmp_path / "o/manifest.json").read_text())
    assert manifest["files"] == ["plate.xyz"]
    assert main(["gen-terrain", plate_spec, "--out", str(tmp_path / "p"), "--format", "pcd"]) == 0
    assert (tmp_path / "p/plate.pcd").read_text().startswith("#")


def test_gen_terrain_missing_spec(tmp_path, capsys):
    assert main(["gen-terrain", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert "spec not found" in capsys.readouterr().err


def test_gen_terrain_negative_size_names_field(tmp_path, capsys):
    bad = dict(PLATE, primitives=[{"type": "plate", "x": [3, 1], "y": [0, 3], "z": 0.0}])
    assert main(["gen-terrain", write_json(tmp_path / "bad.json", bad), "--out", str(tmp_path)]) == 2
    assert "primitives.0.plate.x" in capsys.readouterr().err


def test_plan_success_artifacts(tmp_path, plate_spec):
    out = tmp_path / "plan"
    assert main(["plan", plate_spec, "--out", str(out), "--seed", "3"]) == 0
    for name in ("tree.json", "sparse_path.json", "dense_path.csv", "manifest.json"):
        assert (out / name).exists(), name
    rows = list(csv.reader((out / "dense_path.csv").open()))
    assert rows[0] == ["x", "y", "z", "tau", "sigma"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 3
    assert sorted(manifest["files"]) == ["dense_path.csv", "sparse_path.json", "tree.json"]


def test_plan_is_deterministic(tmp_path, plate_spec):
    for d in ("a", "b"):
        assert main(["plan", plate_spec, "--out", str(tmp_path / d), "--seed", "5"]) == 0
    for name in ("tree.json", "sparse_path.json", "dense_path.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_plan_unreachable_exits_1_with_tree(tmp_path):
    spec = write_json(tmp_path / "island.json", ISLAND)
    out = tmp_path / "o"
    assert main(["plan", spec, "--out", str(out), "--iterations", "300"]) == 1
    assert (out / "tree.json").exists()
    assert not (out / "sparse_path.json").exists()


def test_plan_explicit_endpoints_override_spec(tmp_path, plate_spec):
    out = tmp_path / "o"
    assert main(["plan", plate_spec, "--out", str(out), "--start", "1", "1", "--goal", "3", "2"]) == 0
    assert json.loads((out / "manifest.json").read_text())["goal"] == [3.0, 2.0]


def test_plan_from_point_cloud_needs_endpoints(tmp_path, plate_spec, capsys):
    main(["gen-terrain", plate_spec, "--out", str(tmp_path / "g")])
    cloud = str(tmp_path / "g/plate.xyz")
    assert main(["plan", cloud, "--out", str(tmp_path / "o")]) == 2
    assert "--start" in capsys.readouterr().err
    assert main(["plan", cloud, "--out", str(tmp_path / "o"), "--start", "1", "1.5", "--goal", "5", "1.5"]) == 0


def test_malformed_config_exit_2_with_field_path(tmp_path, plate_spec, capsys):
    cfg = write_json(tmp_path / "cfg.json", {"planner": {"step": -1}})
    assert main(["plan", plate_spec, "--out", str(tmp_path / "o"), "--config", cfg]) == 2
    assert "planner.step" in capsys.readouterr().err
    cfg = write_json(tmp_path / "cfg2.json", {"nmpc": {"unknown_key": 1}})
    assert main(["plan", plate_spec, "--out", str(tmp_path / "o"), "--config", cfg]) == 2
    assert "nmpc.unknown_key" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path, plate_spec, capsys):
    assert main(["plan", plate_spec, "--out", str(tmp_path / "o"), "--config", str(tmp_path / "x.json")]) == 2
    assert "config not found" in capsys.readouterr().err


def test_simulate_success_and_ablation(tmp_path, plate_spec):
    out = tmp_path / "sim"
    assert main(["simulate", plate_spec, "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["success"] is True
    rows = list(csv.DictReader((out / "trajectory.csv").open()))
    assert rows and all(float(r["lambda"]) >= 1.0 for r in rows)

    out2 = tmp_path / "sim2"
    assert main(["simulate", plate_spec, "--out", str(out2), "--no-traversability-weight"]) == 0
    rows = list(csv.DictReader((out2 / "trajectory.csv").open()))
    assert all(float(r["lambda"]) == 1.0 for r in rows)
    manifest = json.loads((out2 / "manifest.json").read_text())
    assert manifest["config"]["nmpc"]["use_traversability_weight"] is False


def test_simulate_failure_keeps_logs(tmp_path):
    spec = write_json(tmp_path / "island.json", ISLAND)
    out = tmp_path / "o"
    cfg = write_json(tmp_path / "cfg.json", {"planner": {"max_iterations": 300}})
    assert main(["simulate", spec, "--out", str(out), "--config", cfg]) == 1
    assert (out / "trajectory.csv").exists()
    assert json.loads((out / "report.json").read_text())["success"] is False


def test_bench_cli(tmp_path, plate_spec):
    fx = tmp_path / "fx"
    fx.mkdir()
    write_json(fx / "plate.json", PLATE)
    outs = []
    for d in ("a", "b"):
        out = tmp_path / d
        assert main(["bench", str(fx), "--trials", "2", "--seed", "7", "--out", str(out),
                     "--refine-iterations", "20"]) == 0
        outs.append(out)
    rows = list(csv.reader((outs[0] / "bench.csv").open()))
    assert len(rows) == 1 + 2
    assert (outs[0] / "bench_trials.json").read_bytes() == (outs[1] / "bench_trials.json").read_bytes()
    manifest = json.loads((outs[0] / "manifest.json").read_text())
    assert sorted(manifest["files"]) == ["bench.csv", "bench.json", "bench_trials.json"]


def test_bench_zero_trials_exit_2(tmp_path, capsys):
    assert main(["bench", str(tmp_path), "--trials", "0", "--out", str(tmp_path / "o")]) == 2
    assert "--trials" in capsys.readouterr().err


def test_console_script_entry_point(tmp_path, plate_spec):
    r = subprocess.run([sys.executable, "-m", "terrain_nav.cli", "gen-terrain", plate_spec, "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "terrain_nav.cli", "plan"], capture_output=True, text=True)
    assert r.returncode == 2


# -- config ---------------------------------------------------------------------------------------


def test_config_overrides_and_cross_checks():
    cfg = AppConfig().with_overrides({"seed": 4, "nmpc.v_max": 1.0})
    assert cfg.seed == 4 and cfg.nmpc.v_max == 1.0
    assert cfg.planner_seeded.seed == 4
    assert cfg.length_scale == pytest.approx(cfg.planner.step)
    with pytest.raises(ValueError):
        AppConfig().with_overrides({"planner.step": 5.0})
    with pytest.raises(ValueError):
        AppConfig().with_overrides({"sim.goal_tolerance": 0.1})
