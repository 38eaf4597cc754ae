import csv
import json
from pathlib import Path

import numpy as np
import pytest

from fsmor import cli

ROOT = Path(__file__).resolve().parents[1]

SMALL_1D = {"system": {"id": "advection-reaction-1d"}, "mesh": {"cells": 16}, "k": 1,
            "sampling": {"kind": "random", "count": 12}, "reduction": {"n_max": 6}, "seed": 3}
TRANSPORT = {"parameters": {"lo": [0.0], "hi": [1.0]}, "mesh": {"cells": 128, "periodic": True}, "k": 0,
             "target": {"kind": "transport", "profile": {"type": "gaussian", "center": 0.5, "width": 0.05}},
             "sampling": {"kind": "grid", "count": 32},
             "dictionaries": [{"kind": "constant", "id": "constant"},
                              {"kind": "shift", "id": "shift",
                               "profiles": [{"type": "gaussian", "center": 0.5, "width": 0.05}]}],
             "sectional": {"n_max": 6}}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(command, cfg_path, out, *extra):
    return cli.run([command, "--config", cfg_path, "--out", str(out), *extra])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_validate_default_system(tmp_path):
    cfg = write(tmp_path, {"system": {"id": "advection-reaction-1d"}})
    assert run("validate", cfg, tmp_path / "o") == 0
    doc = json.loads((tmp_path / "o" / "validation.json").read_text())
    assert doc["passed"]
    assert all(g["mass"] and g["graph"] and g["adjoint_graph"] for g in doc["grams"])


def test_validate_fs2_failure(tmp_path, capsys):
    cfg = write(tmp_path, {"system": {"id": "advection-reaction-1d", "constants": {"c": 0}}})
    assert run("validate", cfg, tmp_path / "o") == 2
    assert "FS2" in capsys.readouterr().out


def test_malformed_json_reports_position(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"system": {\n "id": 3,,}')
    assert run("validate", str(path), tmp_path / "o") == 1
    err = capsys.readouterr().err
    assert "bad.json:2:" in err


@pytest.mark.parametrize("cfg", [
    {"system": {"id": "advection-reaction-1d"}, "colour": "red"},
    {"system": {"id": "advection-reaction-1d"}, "mesh": {"cells": 0}},
    {"system": {"id": "no-such-system"}},
    {"system": {"id": "advection-reaction-1d", "constants": {"speed": 1}}},
])
def test_config_errors(tmp_path, cfg):
    assert run("validate", write(tmp_path, cfg), tmp_path / "o") == 1


def test_usage_errors(tmp_path):
    assert cli.run(["frobnicate", "--config", "x"]) == 1
    assert cli.run(["validate"]) == 1
    cfg = write(tmp_path, {"system": {"id": "advection-reaction-1d"}})
    assert run("validate", cfg, tmp_path / "o", "--threads", "-1") == 1


@pytest.mark.parametrize("name,verdict", [
    ("advection-reaction-2d-case1", "exponential-certified"),
    ("advection-reaction-2d-case3", "uncertified"),
    ("cdr-2d", "exponential-certified"),
    ("elasticity-2d", "exponential-certified"),
])
def test_classify(tmp_path, name, verdict):
    assert run("classify", write(tmp_path, {"system": {"id": name}}), tmp_path / "o") == 0
    doc = json.loads((tmp_path / "o" / "classification.json").read_text())
    assert doc["verdict"] == verdict
    if name == "elasticity-2d":
        assert doc["solve_supported"] is False and "solve_supported=false" in doc["note"]


def test_solve_and_matrix_dump(tmp_path):
    cfg = write(tmp_path, {**SMALL_1D, "mu": [2.0]})
    assert run("solve", cfg, tmp_path / "o", "--debug-matrices") == 0
    doc = json.loads((tmp_path / "o" / "solve.json").read_text())
    assert doc["relative_residual"] <= 1e-12
    assert (tmp_path / "o" / "B.mtx").exists()
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert {"solution.csv", "solve.json", "B.mtx", "F.mtx"} <= set(manifest["outputs"])


def test_solve_unsolvable_system(tmp_path):
    assert run("solve", write(tmp_path, {"system": {"id": "elasticity-2d"}}), tmp_path / "o") == 2


def test_nwidth_outputs(tmp_path):
    assert run("nwidth", write(tmp_path, SMALL_1D), tmp_path / "o") == 0
    table = rows(tmp_path / "o" / "nwidth.csv")
    assert list(table[0]) == ["N", "pod_err", "greedy_err", "selected_mu"]
    assert len(table) == 6
    for col in ("pod_err", "greedy_err"):
        e = [float(r[col]) for r in table]
        assert all(b <= a for a, b in zip(e, e[1:]))
    doc = json.loads((tmp_path / "o" / "nwidth.json").read_text())
    assert doc["classification"] == "exponential-certified"
    assert {"alpha", "beta", "Q_b", "r_squared"} <= set(doc["pod"])


def test_nwidth_single_parameter(tmp_path):
    cfg = write(tmp_path, {**SMALL_1D, "sampling": {"kind": "random", "count": 1}})
    assert run("nwidth", cfg, tmp_path / "o") == 0
    table = rows(tmp_path / "o" / "nwidth.csv")
    assert len(table) == 1 and float(table[0]["greedy_err"]) <= 1e-14


def test_nwidth_flags_uncertified(tmp_path):
    cfg = write(tmp_path, {"system": {"id": "advection-reaction-2d-case3"}, "mesh": {"cells": 4}, "k": 0,
                           "sampling": {"kind": "random", "count": 6}, "reduction": {"n_max": 3}})
    assert run("nwidth", cfg, tmp_path / "o") == 0
    doc = json.loads((tmp_path / "o" / "nwidth.json").read_text())
    assert doc["classification"] == "uncertified" and "uncertified" in doc["note"]


def test_sectional_transport_and_report(tmp_path):
    out = tmp_path / "o"
    assert run("sectional", write(tmp_path, TRANSPORT), out) == 0
    table = rows(out / "sectional.csv")
    shift = {int(r["N"]): float(r["e_N"]) for r in table if r["dictionary"] == "shift"}
    const = {int(r["N"]): float(r["e_N"]) for r in table if r["dictionary"] == "constant"}
    assert shift[1] <= 1e-8 and const[6] >= 1e-2
    doc = json.loads((out / "sectional.json").read_text())
    assert doc["identity_check"]["max_delta"] <= 1e-10
    assert run("report", write(tmp_path, TRANSPORT), out) == 0
    assert "plot" in (out / "plot.gp").read_text()
    assert {r["series"] for r in rows(out / "plot.csv")} == {"sectional:constant", "sectional:shift"}


def test_sectional_empty_dictionary(tmp_path):
    assert run("sectional", write(tmp_path, {**TRANSPORT, "dictionaries": []}), tmp_path / "o") == 1


def test_report_without_inputs(tmp_path):
    assert run("report", write(tmp_path, SMALL_1D), tmp_path / "empty") == 1


def test_byte_identical_outputs_and_check(tmp_path):
    cfg = write(tmp_path, SMALL_1D)
    for out in ("a", "b"):
        assert run("nwidth", cfg, tmp_path / out) == 0
    for name in ("nwidth.csv", "nwidth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert run("nwidth", cfg, tmp_path / "a", "--check") == 0
    assert run("nwidth", cfg, tmp_path / "a", "--check", "--seed", "4") == 2


def test_check_without_manifest(tmp_path):
    assert run("sweep", write(tmp_path, SMALL_1D), tmp_path / "fresh", "--check") == 2


def test_sweep_outputs(tmp_path):
    assert run("sweep", write(tmp_path, SMALL_1D), tmp_path / "o", "--threads", "0") == 0
    table = rows(tmp_path / "o" / "sweep.csv")
    assert len(table) == 12 and max(float(r["residual"]) for r in table) <= 1e-10
    data = np.load(tmp_path / "o" / "snapshots.npz")
    assert data["snapshots"].shape == (32, 12)


def test_csv_text_conventions(tmp_path):
    assert run("nwidth", write(tmp_path, SMALL_1D), tmp_path / "o") == 0
    raw = (tmp_path / "o" / "nwidth.csv").read_bytes()
    assert b"\r" not in raw
    value = rows(tmp_path / "o" / "nwidth.csv")[1]["pod_err"]
    assert value == format(float(value), ".17g")


def test_manifest_contents(tmp_path):
    assert run("classify", write(tmp_path, {"system": {"id": "cdr-1d"}}), tmp_path / "o") == 0
    doc = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert {"artifact_version", "command", "config_sha256", "seed", "wall_clock_s", "timings_s",
            "outputs"} <= set(doc)
    assert doc["config_sha256"] == cli.config_hash({"system": {"id": "cdr-1d"}})


def test_published_schema_matches_package():
    docs = json.loads((ROOT / "docs" / "config.schema.json").read_text())
    assert docs == cli.load_schema()
