import json
import subprocess
import sys

import numpy as np
import pytest

from escape_lab.cli import (
    DEFAULT_SEED,
    EXIT_COMPUTE,
    EXIT_IO,
    EXIT_MANIFEST,
    EXIT_OK,
    ManifestInvalid,
    build_report,
    main,
    parse_manifest,
    report,
)
from escape_lab.field import FieldParams
from escape_lab.sde import SimConfig, run_ensemble

FIG3 = {"alpha": 0.9, "omega": 10.0, "eps": 0.0025}


def _manifest(tmp_path, doc, name="m.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def _simulate_doc(n=300, **sim):
    return {"command": "simulate", "params": FIG3,
            "sim": {"dt": 1e-3, "t_max": 40.0, "init": [-0.8, 0.0], "n_traj": n, **sim}}


def test_spectral_command(tmp_path):
    doc = {"command": "spectral", "params": {"alpha": 0.9, "omega": 20.0, "eps": 0.0025}}
    out = tmp_path / "out"
    assert main(["--manifest", _manifest(tmp_path, doc), "--output", str(out)]) == EXIT_OK
    d = json.loads((out / "spectral.json").read_text(encoding="utf-8"))
    assert d["omega1"] == pytest.approx(4.0, abs=1e-6)
    assert d["omega2"] == 20.0
    run = json.loads((out / "run.json").read_text(encoding="utf-8"))
    assert run["seed"] == DEFAULT_SEED == 0xC0FFEE
    assert run["manifest"]["command"] == "spectral"
    assert run["outputs"] == ["spectral.json", "bernoulli.csv"]


def test_zero_trajectories_rejected(tmp_path):
    path = _manifest(tmp_path, _simulate_doc(n=0))
    assert main(["--manifest", path, "--output", str(tmp_path / "o")]) == EXIT_MANIFEST
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("doc", [
    {"command": "launch"},
    {"command": "spectral", "format_version": 2},
    {"command": "spectral", "colour": "blue"},
    {"command": "spectral", "params": {"alpha": 1.5, "omega": 10.0}},
    {"command": "spectral", "params": {"alpha": 0.5, "omega": 10.0, "beta": 1.0}},
    {"command": "simulate", "params": FIG3, "sim": {"init": [1.0]}},
    {"command": "neuro", "params": {"demo": {}, "J": 3.0}},
])
def test_invalid_manifests(tmp_path, doc):
    assert main(["--manifest", _manifest(tmp_path, doc), "--output", str(tmp_path / "o")]) == EXIT_MANIFEST


def test_unreadable_inputs(tmp_path):
    assert main(["--manifest", str(tmp_path / "missing.json")]) == EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert main(["--manifest", str(bad)]) == EXIT_MANIFEST
    with pytest.raises(ManifestInvalid):
        parse_manifest([1, 2])


def test_rerun_is_byte_identical(tmp_path):
    path = _manifest(tmp_path, _simulate_doc())
    main(["--manifest", path, "--output", str(tmp_path / "a"), "--threads", "1"])
    main(["--manifest", path, "--output", str(tmp_path / "b"), "--threads", "8"])
    main(["--manifest", path, "--output", str(tmp_path / "c"), "--threads", "0"])
    for name in ("records.csv", "histogram.csv", "summary.json"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()


def test_seed_override_changes_output(tmp_path):
    path = _manifest(tmp_path, _simulate_doc(n=50))
    main(["--manifest", path, "--output", str(tmp_path / "a"), "--seed", "1"])
    main(["--manifest", path, "--output", str(tmp_path / "b"), "--seed", "2"])
    assert (tmp_path / "a" / "records.csv").read_bytes() != (tmp_path / "b" / "records.csv").read_bytes()
    run = json.loads((tmp_path / "a" / "run.json").read_text(encoding="utf-8"))
    assert run["seed"] == 1 and run["manifest"]["sim"]["seed"] == 1


def test_every_output_carries_version(tmp_path):
    out = tmp_path / "o"
    path = _manifest(tmp_path, {**_simulate_doc(n=3000, dt=1e-4), "command": "fit"})
    assert main(["--manifest", path, "--output", str(out)]) == EXIT_OK
    run = json.loads((out / "run.json").read_text(encoding="utf-8"))
    assert set(run["outputs"]) == {"records.csv", "fit_histogram.csv", "fit.json", "theory.txt"}
    for name in run["outputs"] + ["run.json"]:
        text = (out / name).read_text(encoding="utf-8")
        if name.endswith(".json"):
            assert json.loads(text)["format_version"] == 1
        else:
            assert text.startswith("# format_version=1\n")


def test_report_from_csv_equals_in_memory(tmp_path):
    p = FieldParams(**FIG3)
    rec = run_ensemble(SimConfig(dt=1e-3, t_max=40.0, init=(-0.8, 0.0), seed=4, n_traj=3000), p)
    rec.to_csv(tmp_path / "r.csv")
    assert report(tmp_path / "r.csv", p) == build_report(rec, p)


def test_report_command_leaves_input_untouched(tmp_path):
    sim = tmp_path / "sim"
    main(["--manifest", _manifest(tmp_path, _simulate_doc(n=3000), "s.json"), "--output", str(sim)])
    before = (sim / "records.csv").read_bytes()
    doc = {"command": "report", "params": FIG3, "options": {"records": str(sim / "records.csv")}}
    out = tmp_path / "rep"
    assert main(["--manifest", _manifest(tmp_path, doc, "r.json"), "--output", str(out)]) == EXIT_OK
    assert (sim / "records.csv").read_bytes() == before
    d = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert d["n_traj"] == 3000
    assert [r["quantity"] for r in d["theory"]] == ["lambda0", "frequency", "decay"]
    assert (out / "report.txt").exists()


def test_censored_only_is_a_compute_error(tmp_path):
    sim = tmp_path / "sim"
    main(["--manifest", _manifest(tmp_path, _simulate_doc(n=20, t_max=0.01), "s.json"), "--output", str(sim)])
    doc = {"command": "report", "params": FIG3, "options": {"records": str(sim / "records.csv")}}
    assert main(["--manifest", _manifest(tmp_path, doc, "r.json"), "--output", str(tmp_path / "r")]) == EXIT_COMPUTE


def test_bad_record_version_is_io_error(tmp_path):
    rec = tmp_path / "r.csv"
    rec.write_text("# format_version=7\ntraj_index,exit_time,exit_angle,winding_count,status\n", encoding="utf-8")
    doc = {"command": "report", "params": FIG3, "options": {"records": str(rec)}}
    assert main(["--manifest", _manifest(tmp_path, doc), "--output", str(tmp_path / "o")]) == EXIT_IO


def test_report_needs_records(tmp_path):
    doc = {"command": "report", "params": FIG3}
    assert main(["--manifest", _manifest(tmp_path, doc), "--output", str(tmp_path / "o")]) == EXIT_MANIFEST


def test_exit_density_and_eikonal_commands(tmp_path):
    doc = {"command": "exit-density", "params": {"alpha": 0.9, "omega": 10.0, "eps": 0.005},
           "sim": {"dt": 1e-3, "t_max": 40.0, "init": [-0.8, 0.0], "n_traj": 500}, "options": {"cells": 32}}
    out = tmp_path / "d"
    assert main(["--manifest", _manifest(tmp_path, doc, "d.json"), "--output", str(out)]) == EXIT_OK
    d = json.loads((out / "exit_density.json").read_text(encoding="utf-8"))
    assert 0.0 <= d["l1"] <= 2.0
    doc = {"command": "eikonal", "params": {"alpha": 0.0, "omega": 10.0}, "options": {"alpha_grid": [0.0, 0.5]}}
    out = tmp_path / "e"
    assert main(["--manifest", _manifest(tmp_path, doc, "e.json"), "--output", str(out)]) == EXIT_OK
    shots = json.loads((out / "eikonal.json").read_text(encoding="utf-8"))["shots"]
    assert [s["alpha"] for s in shots] == [0.0, 0.5]


def test_neuro_command(tmp_path):
    doc = {"command": "neuro", "params": {"demo": {}}, "sim": {"n_traj": 200, "t_max": 60.0}}
    out = tmp_path / "n"
    assert main(["--manifest", _manifest(tmp_path, doc), "--output", str(out)]) == EXIT_OK
    s = json.loads((out / "neuro_summary.json").read_text(encoding="utf-8"))
    assert s["not_from_paper"] is True
    assert s["n_exited"] + s["n_censored"] == 200
    run = json.loads((out / "run.json").read_text(encoding="utf-8"))
    assert run["manifest"]["sim"]["init"] == [20.0, 0.21]


def test_module_entry_point(tmp_path):
    doc = {"command": "spectral", "params": {"alpha": 0.3, "omega": 5.0}}
    r = subprocess.run([sys.executable, "-m", "escape_lab", "--manifest", _manifest(tmp_path, doc),
                        "--output", str(tmp_path / "o")], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert np.isclose(json.loads((tmp_path / "o" / "spectral.json").read_text())["omega1"], 4.0)
