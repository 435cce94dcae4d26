import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from hsdrelax import __version__
from hsdrelax.cellsolver import clear_memo
from hsdrelax.cli import config_hash, dump_json, fmt, run
from hsdrelax.hierarchy import HierarchicalDeformation
from hsdrelax.sbvmesh import Grid, SBVField, affine_field


def fixture_doc(jump=2.0):
    grid = Grid(1, 2, box=((0.0, 1.0),))
    g = affine_field(grid, [[1.0]])
    g = SBVField(grid, g.offsets + np.array([[0.0], [jump]]), g.slopes)
    return HierarchicalDeformation(g, (np.full((1, 1), 0.5), np.zeros((1, 1)))).to_json()


SMALL = {
    "relax-bulk": {"N": 2, "resolutions": [2, 4], "samples": 1, "solver": {"restarts": 2}},
    "relax-surface": {"N": 2, "n": 3, "samples": 2, "solver": {"restarts": 2}},
    "recurse": {"N": 1, "stage": 2, "backend": "nested-solver", "samples": 3},
    "energy": {"deformation": "fixture.json"},
    "approximate": {"deformation": "fixture.json", "indices": [[2, 4], [2, 4]]},
    "check-class": {"sampling": {"count": 32}},
    "verify-example": {
        "bulk": {"samples": 1, "n": 2},
        "surface": {"samples": 1, "n": 3},
        "stage2": {"samples_1d": 2, "samples_2d": 0},
    },
}


def invoke(tmp_path, command, config, out="out", extra=()):
    cfg = tmp_path / f"{command}.cfg.json"
    cfg.write_text(json.dumps(config))
    (tmp_path / "fixture.json").write_text(json.dumps(fixture_doc()))
    clear_memo()
    return run([command, "--config", str(cfg), "--out", str(tmp_path / out), *extra])


def last_doc(text):
    dec, pos, doc = json.JSONDecoder(), 0, None
    text = text.strip()
    while pos < len(text):
        doc, pos = dec.raw_decode(text, pos)
        while pos < len(text) and text[pos].isspace():
            pos += 1
    return doc


def read_outputs(path, command):
    return {name: (path / name).read_bytes() for name in (f"{command}.json", f"{command}.csv", f"{command}_series.csv")}


@pytest.mark.parametrize("command", sorted(SMALL))
def test_command_runs_and_is_deterministic(tmp_path, command, capsys):
    assert invoke(tmp_path, command, SMALL[command], "a", ["--seed", "7"]) == 0
    assert invoke(tmp_path, command, SMALL[command], "b", ["--seed", "7"]) == 0
    a, b = read_outputs(tmp_path / "a", command), read_outputs(tmp_path / "b", command)
    assert a == b
    doc = json.loads(a[f"{command}.json"])
    assert doc["meta"]["version"] == __version__
    assert doc["meta"]["seed"] == 7
    header = a[f"{command}.csv"].decode().splitlines()[0]
    assert header.startswith(f"# hsdrelax {__version__} command={command} config_hash=")
    assert header.endswith(doc["meta"]["config_hash"])
    status = last_doc(capsys.readouterr().out)
    assert status["status"] == "ok"


def test_energy_output_values(tmp_path):
    assert invoke(tmp_path, "energy", SMALL["energy"]) == 0
    doc = json.loads((tmp_path / "out" / "energy.json").read_text())
    assert doc["total"] == pytest.approx(3.0, abs=1e-10)
    assert doc["passed"] is True
    rows = list(csv.reader(io.StringIO((tmp_path / "out" / "energy.csv").read_text())))
    assert rows[1][:4] == ["level", "bulk", "surface", "total"]
    # CSV and JSON carry the same 17-digit numbers
    assert float(rows[2][3]) == doc["total"]


def test_csv_and_json_agree_for_recurse(tmp_path):
    assert invoke(tmp_path, "recurse", SMALL["recurse"]) == 0
    doc = json.loads((tmp_path / "out" / "recurse.json").read_text())
    rows = list(csv.reader(io.StringIO((tmp_path / "out" / "recurse.csv").read_text())))[2:]
    assert [float(r[3]) for r in rows] == [d["value"] for d in doc["results"]]
    assert doc["passed"] is True


def test_seed_changes_samples(tmp_path):
    assert invoke(tmp_path, "recurse", SMALL["recurse"], "a", ["--seed", "1"]) == 0
    assert invoke(tmp_path, "recurse", SMALL["recurse"], "b", ["--seed", "2"]) == 0
    a = json.loads((tmp_path / "a" / "recurse.json").read_text())
    b = json.loads((tmp_path / "b" / "recurse.json").read_text())
    assert a["results"] != b["results"]
    assert a["meta"]["config_hash"] != b["meta"]["config_hash"]


def test_cache_file_round_trip(tmp_path):
    cache = tmp_path / "cache.json"
    extra = ["--cache", str(cache)]
    assert invoke(tmp_path, "recurse", SMALL["recurse"], "a", extra) == 0
    assert json.loads(cache.read_text())["version"] == "densitycache-v1"
    assert invoke(tmp_path, "recurse", SMALL["recurse"], "b", extra) == 0
    assert read_outputs(tmp_path / "a", "recurse") == read_outputs(tmp_path / "b", "recurse")


def test_check_class_probe_fails_homogeneity(tmp_path):
    cfg = {"density": {"surface": "norm-squared"}, "sampling": {"count": 32}}
    assert invoke(tmp_path, "check-class", cfg) == 0
    doc = json.loads((tmp_path / "out" / "check-class.json").read_text())
    assert doc["passed"] is False
    assert "homogeneity" in doc["failures"]


@pytest.mark.parametrize(
    "command,config",
    [
        ("relax-bulk", {"N": 3}),
        ("relax-bulk", {"bogus": 1}),
        ("relax-surface", {"density": {"surface": "unknown"}}),
        ("recurse", {"backend": "table"}),
        ("energy", {}),
        ("approximate", {"deformation": "missing.json"}),
        ("verify-example", {"density": {"surface": "norm-interfacial"}}),
    ],
)
def test_bad_config_exits_2(tmp_path, command, config, capsys):
    assert invoke(tmp_path, command, config) == 2
    err = last_doc(capsys.readouterr().out)
    assert err["error"]["kind"] == "config"
    assert (tmp_path / "out" / "error.json").exists()


def test_bad_flags_exit_2(tmp_path, capsys):
    assert run(["relax-bulk", "--seed", "-1", "--out", str(tmp_path)]) == 2
    assert run(["relax-bulk", "--threads", "0", "--out", str(tmp_path)]) == 2
    assert run(["no-such-command"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["energy", "--config", str(bad)]) == 2


def test_helpers():
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt(float("nan")) == "NaN"
    assert dump_json({"a": [1.0, 2]}) == dump_json({"a": [1.0, 2]})
    h = config_hash({"command": "x", "config": {"b": 1, "a": 2}, "seed": 0, "tolerance": None})
    assert h == config_hash({"command": "x", "config": {"a": 2, "b": 1}, "seed": 0, "tolerance": None})


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hsdrelax", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert __version__ in proc.stdout
