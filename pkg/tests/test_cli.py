import csv
import hashlib
import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import yaml

from shuttlesim.cli import main
from shuttlesim.config import check, expand_range, validate
from shuttlesim.experiments import inaccessible

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(tmp_path, doc, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc) if isinstance(doc, dict) else doc)
    return p


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path, capsys):
    assert validate(path) == []
    assert main(["validate", "--config", str(path)]) == 0


def test_distance_beyond_bound(tmp_path, capsys):
    p = write(tmp_path, {"experiment": "coherent_shuttle_map",
                         "scan": {"distance": [0, 400], "tau_s": [100, 200]}})
    problems = validate(p)
    assert any("336" in m and "scan.distance" in m for m in problems)
    assert main(["validate", "--config", str(p)]) == 1
    assert "336" in capsys.readouterr().out


def test_negative_shots_and_unknown_key(tmp_path):
    p = write(tmp_path, {"experiment": "st0_dqd", "shots": -5, "scan": {"tau_dqd": [1, 2]},
                         "disorder": {"sigma_dgg": 1.0}})
    problems = validate(p)
    assert any(m.startswith("shots:") for m in problems)
    assert any("disorder.sigma_dgg" in m for m in problems)


def test_every_violation_listed(tmp_path):
    p = write(tmp_path, {"experiment": "wait_map", "shots": 0, "realizations": 5,
                         "readout": {"sigma3": -1},
                         "scan": {"position": [500], "tau_w": []}})
    problems = validate(p)
    keys = {m.split(":")[0] for m in problems}
    assert {"shots", "realizations", "readout.sigma3", "scan.position", "scan.tau_w"} <= keys


def test_parse_error_has_line_and_column(tmp_path):
    p = write(tmp_path, "experiment: st0_dqd\nscan:\n  tau_dqd: [1, 2\n")
    (msg,) = validate(p)
    assert f"{p}:" in msg and "parse error" in msg
    assert msg.split(":")[1].isdigit() and msg.split(":")[2].isdigit()


def test_missing_file(tmp_path):
    assert main(["validate", "--config", str(tmp_path / "nope.yaml")]) == 3


def test_expand_range_forms():
    probs = []
    assert np.allclose(expand_range({"start": 0, "stop": 1, "num": 3}, "k", probs), [0, .5, 1])
    assert np.allclose(expand_range({"start": 0, "stop": 10, "step": 5}, "k", probs), [0, 5, 10])
    assert np.allclose(expand_range([3, 1], "k", probs), [3, 1])
    assert probs == []
    expand_range({"start": 0, "stop": 1}, "k", probs)
    expand_range([], "k", probs)
    assert len(probs) == 2


def test_long_distance_default_wait_axis():
    cfg, problems = check({"experiment": "long_distance", "scan": {"loops": [1, 12]}})
    assert problems == []
    assert np.allclose(cfg.axes["tau_dqd"], np.linspace(0, 1000, 101))


def test_mask_equals_triangle(tmp_path):
    doc = {
        "experiment": "coherent_shuttle_map", "seed": 3, "shots": 200, "realizations": 100,
        "disorder": {"channel_length": 340},
        "scan": {"distance": [0, 70, 140, 280, 336], "tau_s": {"start": 0, "stop": 600, "num": 61}},
    }
    p = write(tmp_path, doc)
    code = main(["run", "--config", str(p), "--out", str(tmp_path / "out")])
    assert code in (0, 2)
    data = rows(tmp_path / "out" / "coherent_shuttle_map" / "seed3" / "data.csv")
    for r in data:
        tau, d = Fraction(r["tau_ns"]), Fraction(r["d_nm"])
        expect = tau * Fraction("2.8") < 2 * d  # exact arithmetic at the boundary
        assert bool(int(r["masked"])) == expect
        assert (r["P_S"] == "") == expect
    assert any(int(r["masked"]) for r in data)
    # boundary: tau exactly 2d/v is accessible
    assert not inaccessible(200.0, 280.0, 2.8)


def test_shots_one_single_point(tmp_path, capsys):
    doc = {"experiment": "st0_dqd", "shots": 1, "realizations": 100,
           "disorder": {"channel_length": 20}, "scan": {"tau_dqd": [40]}}
    p = write(tmp_path, doc)
    assert main(["run", "--config", str(p), "--out", str(tmp_path)]) == 0
    (r,) = rows(tmp_path / "st0_dqd" / "seed0" / "data.csv")
    assert float(r["P_S"]) in (0.0, 1.0)
    assert r["n_shots"] == "1"
    fits = json.loads((tmp_path / "st0_dqd" / "seed0" / "fits.json").read_text())
    assert "skipped" in fits["lines"][0]


def _bundle(tmp_path, jobs, doc):
    p = write(tmp_path, doc, f"c{jobs}.yaml")
    out = tmp_path / f"j{jobs}"
    main(["run", "--config", str(p), "--out", str(out), "--jobs", str(jobs)])
    return next(out.glob("*/*"))


def test_byte_identical_across_jobs(tmp_path):
    doc = {"experiment": "wait_map", "seed": 9, "shots": 500, "realizations": 600,
           "disorder": {"channel_length": 300, "sigma_dg": 3.9e-5, "kernel": "rational"},
           "dephasing": {"t2_left": 1110},
           "scan": {"position": [0, 140, 280], "tau_w": {"start": 0, "stop": 800, "num": 81}}}
    a, b = _bundle(tmp_path, 1, doc), _bundle(tmp_path, 4, doc)
    for name in ("data.csv", "fits.json", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_manifest_lists_hashes(tmp_path):
    doc = {"experiment": "charge_fidelity_scan", "seed": 2, "shots": 2000,
           "scan": {"u_lower": [0.1, 0.12, 0.15]}}
    d = _bundle(tmp_path, 1, doc)
    m = json.loads((d / "manifest.json").read_text())
    for name in ("data.csv", "fits.json"):
        assert m["files"][name] == hashlib.sha256((d / name).read_bytes()).hexdigest()
    assert m["seed"] == 2
    assert m["config"]["experiment"] == "charge_fidelity_scan"
    assert "jobs" not in m["config"]


def test_seed_override_changes_output(tmp_path):
    doc = {"experiment": "charge_fidelity_scan", "seed": 2, "shots": 2000,
           "scan": {"u_lower": [0.11]}}
    p = write(tmp_path, doc)
    main(["run", "--config", str(p), "--out", str(tmp_path), "--seed", "8"])
    assert (tmp_path / "charge_fidelity_scan" / "seed8" / "data.csv").exists()


def test_report_refits_identically(tmp_path):
    doc = {"experiment": "st0_dqd", "seed": 1, "shots": 5000, "realizations": 2000,
           "disorder": {"channel_length": 20, "sigma_hf": 1.6475},
           "scan": {"tau_dqd": {"start": 0, "stop": 1000, "num": 101}}}
    d = _bundle(tmp_path, 1, doc)
    before = (d / "fits.json").read_bytes()
    assert main(["report", str(d)]) == 0
    assert (d / "fits.json").read_bytes() == before


def test_config_error_exit_code(tmp_path):
    p = write(tmp_path, {"experiment": "nope"})
    assert main(["run", "--config", str(p), "--out", str(tmp_path)]) == 1


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    doc = {"experiment": "charge_fidelity_scan", "shots": 100, "scan": {"u_lower": [0.15]}}
    p = write(tmp_path, doc)
    assert main(["run", "--config", str(p), "--out", str(blocker)]) == 3


def test_fit_failure_exit_code(tmp_path):
    # 50 ns sampling cannot resolve a 7.29 MHz oscillation
    doc = {"experiment": "st0_dqd", "shots": 2000, "realizations": 200,
           "disorder": {"channel_length": 20},
           "scan": {"tau_dqd": {"start": 0, "stop": 1000, "num": 21}}}
    p = write(tmp_path, doc)
    assert main(["run", "--config", str(p), "--out", str(tmp_path)]) == 2
    fits = json.loads((tmp_path / "st0_dqd" / "seed0" / "fits.json").read_text())
    assert "error" in fits["lines"][0]


def test_charge_scan_rows(tmp_path):
    doc = {"experiment": "charge_fidelity_scan", "seed": 4, "shots": 20000,
           "scan": {"u_lower": [0.09, 0.13, 0.15], "frequency": [5, 10]}}
    d = _bundle(tmp_path, 1, doc)
    data = rows(d / "data.csv")
    assert len(data) == 6
    by = {(float(r["u_lower_V"]), float(r["frequency_MHz"])): float(r["F_C"]) for r in data}
    assert by[(0.09, 10.0)] < 0.01
    assert by[(0.15, 10.0)] > 0.99
    for r in data:
        assert float(r["wilson_lo"]) <= float(r["F_C"]) <= float(r["wilson_hi"])
