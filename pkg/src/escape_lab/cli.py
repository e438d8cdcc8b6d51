"""Batch front door: run one JSON manifest and write CSV/JSON artifacts.

Exit codes: 0 success, 2 invalid manifest, 3 computation failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .eikonal import NoEscape, boundary_value, psi_hat_scan, write_scan_csv
from .exit_stats import (
    PERIOD_BINNING,
    Binning,
    EmptyInput,
    analytic_cell_density,
    build_histogram,
    class_mean_times,
    density_distance,
    empirical_angular_density,
    exit_density_moments,
    exit_density_normalizer,
    first_peak_mass,
    histogram_from_records,
    peak_period,
    significant_peak_count,
    spectral_line_count,
    write_angular_csv,
)
from .field import DomainError, FieldParams
from .fitter import InsufficientData, NotConverged, fit_two_term, format_report, theory_report
from .neuro import (
    REFERENCE_INIT,
    DegenerateRegime,
    DemoDesign,
    NeuroParams,
    NeuroState,
    NoCycleFound,
    critical_points,
    demo_params,
    limit_cycle,
    simulate_upstate_ensemble,
    write_neuro_json,
)
from .sde import (
    DEFAULT_SEED,
    FORMAT_VERSION,
    ExitRecords,
    FormatVersionError,
    InitOutsideDomain,
    SimConfig,
    run_ensemble,
)
from .spectral import MfptVariant, NonPositiveZ, bernoulli_xi, mfpt_asymptotic, regime, spectral_report

EXIT_OK = 0
EXIT_MANIFEST = 2
EXIT_COMPUTE = 3
EXIT_IO = 4

COMMANDS = ("simulate", "exit-density", "eikonal", "spectral", "fit", "neuro", "report")
NEURO_SIM_DEFAULTS = {"dt": 1e-3, "t_max": 200.0, "init": list(REFERENCE_INIT)}

log = logging.getLogger("escape_lab")

COMPUTE_ERRORS = (ArithmeticError, DomainError, NoEscape, InsufficientData, NotConverged,
                  DegenerateRegime, NoCycleFound, EmptyInput, InitOutsideDomain, NonPositiveZ,
                  ValueError)


class ManifestInvalid(ValueError):
    """The manifest is malformed or names invalid parameters."""


@dataclass
class RunManifest:
    command: str
    params: FieldParams | NeuroParams
    sim: SimConfig
    output_dir: Path
    format_version: int = FORMAT_VERSION
    options: dict = field(default_factory=dict)
    document: dict = field(default_factory=dict)


def _build(cls, data: dict, what: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ManifestInvalid(f"{what}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ManifestInvalid(f"{what}: {exc}") from exc


def _neuro_params(raw: dict) -> NeuroParams:
    raw = dict(raw)
    design = raw.pop("demo", None)
    if design is not None or not raw:
        if raw:
            raise ManifestInvalid("params: 'demo' cannot be combined with explicit parameters")
        return demo_params(_build(DemoDesign, design or {}, "params.demo"))
    return _build(NeuroParams, raw, "params")


def parse_manifest(doc: dict, seed: int | None = None, output: str | None = None) -> RunManifest:
    """Validate a manifest document; every parameter is checked before any compute."""
    if not isinstance(doc, dict):
        raise ManifestInvalid("manifest must be a JSON object")
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ManifestInvalid(f"unsupported format_version {version!r}")
    command = doc.get("command")
    if command not in COMMANDS:
        raise ManifestInvalid(f"command must be one of {COMMANDS}, got {command!r}")
    known = {"format_version", "command", "params", "sim", "output_dir", "options"}
    extra = set(doc) - known
    if extra:
        raise ManifestInvalid(f"unknown manifest key(s) {sorted(extra)}")
    raw_params = doc.get("params", {})
    raw_sim = doc.get("sim", {})
    options = doc.get("options", {})
    for name, value in (("params", raw_params), ("sim", raw_sim), ("options", options)):
        if not isinstance(value, dict):
            raise ManifestInvalid(f"{name} must be a JSON object")
    if command == "neuro":
        params = _neuro_params(raw_params)
        raw_sim = {**NEURO_SIM_DEFAULTS, **raw_sim}
    else:
        params = _build(FieldParams, raw_params, "params")
    raw_sim = dict(raw_sim)
    if seed is not None:
        raw_sim["seed"] = seed
    raw_sim.setdefault("seed", DEFAULT_SEED)
    if isinstance(raw_sim.get("init"), list):
        if len(raw_sim["init"]) != 2:
            raise ManifestInvalid("sim.init must be a point [x, y] or 'uniform-disk'")
        raw_sim["init"] = tuple(raw_sim["init"])
    sim = _build(SimConfig, raw_sim, "sim")
    out = Path(output if output is not None else doc.get("output_dir", "escape_lab_out"))
    echo = dict(doc)
    echo["sim"] = {**raw_sim, "init": list(sim.init) if not isinstance(sim.init, str) else sim.init}
    echo["output_dir"] = str(out)
    return RunManifest(command, params, sim, out, version, options, echo)


def load_manifest(path, seed: int | None = None, output: str | None = None) -> RunManifest:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestInvalid(f"{path}: not valid JSON ({exc})") from exc
    return parse_manifest(doc, seed, output)


def _plain(obj):
    """Convert numpy scalars and arrays for JSON output."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def write_json(path: Path, doc: dict) -> Path:
    doc = {"format_version": FORMAT_VERSION, **_plain(doc)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")
    return path


def _write_table(path: Path, table: str) -> Path:
    path.write_text(f"# format_version={FORMAT_VERSION}\n{table}\n", encoding="utf-8")
    return path


def _option(m: RunManifest, name: str, default):
    return m.options.get(name, default)


def _records_input(m: RunManifest) -> ExitRecords:
    src = _option(m, "records", None)
    if src is None:
        raise ManifestInvalid(f"command {m.command!r} needs options.records")
    return ExitRecords.from_csv(src)


def build_report(records: ExitRecords, params: FieldParams) -> dict:
    """Histogram, detected period, two-term fit, theory comparison and regime."""
    times = records.exit_times()
    if len(times) == 0:
        raise InsufficientData("no exited trajectories")
    fine = build_histogram(times, PERIOD_BINNING, records.n_censored)
    coarse = build_histogram(times, Binning(), records.n_censored)
    pp = peak_period(fine)
    fit = fit_two_term(fine)
    eta, label = regime(params)
    doc = {
        "n_traj": len(records),
        "n_exited": int(records.exited.sum()),
        "n_censored": records.n_censored,
        "mean_exit_time": float(np.mean(times)),
        "detected_period": None if pp is None else pp.period,
        "period_confidence": None if pp is None else pp.confidence,
        "expected_period": 2.0 * np.pi / params.omega,
        "significant_peaks": significant_peak_count(coarse),
        "spectral_lines": spectral_line_count(fine),
        "first_peak_mass": first_peak_mass(records),
        "fit": fit.to_dict(),
        "eta": eta,
        "regime": label.value,
    }
    if params.eps > 0 and 0.0 < params.alpha < 1.0:
        rows = theory_report(fit, params)
        doc["theory"] = [{"quantity": r.name, "theory": r.theory, "fit": r.fit,
                          "relative_error": r.relative_error} for r in rows]
        doc["mfpt_AF"] = mfpt_asymptotic(params, MfptVariant.AF)
        doc["theory_table"] = format_report(rows)
    return _plain(doc)


def report(records_path, params: FieldParams) -> dict:
    return build_report(ExitRecords.from_csv(records_path), params)


def _cmd_simulate(m: RunManifest, out: Path, threads: int | None) -> list[Path]:
    rec = run_ensemble(m.sim, m.params, threads)
    rec.to_csv(out / "records.csv")
    h = histogram_from_records(rec, Binning(bins=int(_option(m, "bins", 200))))
    h.to_csv(out / "histogram.csv")
    summary = {"n_exited": int(rec.exited.sum()), "n_censored": rec.n_censored,
               "class_mean_times": class_mean_times(rec)}
    return [out / "records.csv", out / "histogram.csv", write_json(out / "summary.json", summary)]


def _cmd_exit_density(m: RunManifest, out: Path, threads: int | None) -> list[Path]:
    rec = run_ensemble(m.sim, m.params, threads)
    rec.to_csv(out / "records.csv")
    cells = int(_option(m, "cells", 64))
    emp = empirical_angular_density(rec.exit_angle[rec.exited], cells)
    ana = analytic_cell_density(m.params.alpha, cells)
    write_angular_csv(out / "angular_density.csv", emp, ana)
    dist = density_distance(emp, ana)
    mom = exit_density_moments(m.params.alpha)
    doc = {"l1": dist.l1, "ks": dist.ks, "empirical_mode": float(emp.theta_grid[np.argmax(emp.values)]),
           "normalizer": exit_density_normalizer(m.params.alpha),
           "std": mom.std, "asymptotic_std": mom.asymptotic_std}
    return [out / "records.csv", out / "angular_density.csv", write_json(out / "exit_density.json", doc)]


def _cmd_eikonal(m: RunManifest, out: Path, threads: int | None) -> list[Path]:
    grid = [float(a) for a in _option(m, "alpha_grid", [round(0.1 * k, 1) for k in range(10)])]
    delta = float(_option(m, "delta", 1e-3))
    theta0 = float(_option(m, "theta0", np.pi))
    scan = psi_hat_scan(grid, m.params, delta, theta0)
    write_scan_csv(scan, out / "eikonal_scan.csv")
    doc = {"delta": delta, "theta0": theta0,
           "shots": [{"alpha": s.alpha, "psi_hat": s.psi_hat, "winding": s.winding_count,
                      "kind": s.kind.value, "hamiltonian_drift": s.hamiltonian_drift} for s in scan]}
    if _option(m, "boundary", False):
        doc["boundary_values"] = []
        for a in grid:
            bv = boundary_value(FieldParams(a, m.params.omega, m.params.lam, m.params.eps), delta)
            doc["boundary_values"].append({"alpha": a, "psi_hat": bv.psi_hat})
    return [out / "eikonal_scan.csv", write_json(out / "eikonal.json", doc)]


def _cmd_spectral(m: RunManifest, out: Path, threads: int | None) -> list[Path]:
    grid = int(_option(m, "grid_size", 4096))
    rep = spectral_report(m.params, _option(m, "psi_hat", None), grid_size=grid)
    bernoulli_xi(m.params, grid).to_csv(out / "bernoulli.csv")
    return [write_json(out / "spectral.json", rep.to_dict()), out / "bernoulli.csv"]


def _cmd_fit(m: RunManifest, out: Path, threads: int | None) -> list[Path]:
    if "records" in m.options:
        rec = _records_input(m)
    else:
        rec = run_ensemble(m.sim, m.params, threads)
        rec.to_csv(out / "records.csv")
    h = histogram_from_records(rec, Binning(bins=int(_option(m, "bins", PERIOD_BINNING.bins))))
    h.to_csv(out / "fit_histogram.csv")
    fit = fit_two_term(h)
    paths = [out / "fit_histogram.csv", write_json(out / "fit.json", fit.to_dict())]
    if m.params.eps > 0 and 0.0 < m.params.alpha < 1.0:
        _write_table(out / "theory.txt", format_report(theory_report(fit, m.params)))
        paths.append(out / "theory.txt")
    if "records" not in m.options:
        paths.insert(0, out / "records.csv")
    return paths


def _cmd_neuro(m: RunManifest, out: Path, threads: int | None) -> list[Path]:
    p = m.params
    crit = critical_points(p)
    cycle = limit_cycle(p, crit)
    write_neuro_json(out / "neuro.json", p, crit, cycle)
    init = NeuroState(*m.sim.init)
    ens = simulate_upstate_ensemble(p, init, int(m.sim.n_traj), int(m.sim.seed), m.sim.dt, m.sim.t_max,
                                    threads, cycle)
    rec = ens.records
    rec.to_csv(out / "upstate_records.csv")
    times = rec.exit_times()
    paths = [out / "neuro.json", out / "upstate_records.csv"]
    summary = {"not_from_paper": p.not_from_paper, "focus_period": crit.focus_period,
               "n_exited": int(rec.exited.sum()), "n_censored": rec.n_censored,
               "mu_excursions": ens.mu_excursion_count}
    if len(times):
        h = build_histogram(times, Binning(), rec.n_censored)
        h.to_csv(out / "upstate_histogram.csv")
        paths.append(out / "upstate_histogram.csv")
        pp = peak_period(build_histogram(times, PERIOD_BINNING, rec.n_censored))
        summary.update(significant_peaks=significant_peak_count(h),
                       peak_period=None if pp is None else pp.period,
                       class_mean_times=class_mean_times(rec))
    paths.append(write_json(out / "neuro_summary.json", summary))
    return paths


def _cmd_report(m: RunManifest, out: Path, threads: int | None) -> list[Path]:
    rec = _records_input(m)
    doc = build_report(rec, m.params)
    table = doc.pop("theory_table", None)
    paths = [write_json(out / "report.json", doc)]
    if table is not None:
        _write_table(out / "report.txt", table)
        paths.append(out / "report.txt")
    return paths


DISPATCH = {
    "simulate": _cmd_simulate,
    "exit-density": _cmd_exit_density,
    "eikonal": _cmd_eikonal,
    "spectral": _cmd_spectral,
    "fit": _cmd_fit,
    "neuro": _cmd_neuro,
    "report": _cmd_report,
}


def run(m: RunManifest, threads: int | None = None) -> list[Path]:
    """Execute a validated manifest; returns the artifact paths including ``run.json``."""
    out = m.output_dir
    out.mkdir(parents=True, exist_ok=True)
    log.info("command=%s output=%s seed=%d", m.command, out, m.sim.seed)
    paths = DISPATCH[m.command](m, out, threads)
    params = asdict(m.params)
    doc = {"version": __version__, "command": m.command, "seed": int(m.sim.seed),
           "manifest": m.document, "params": params, "outputs": [p.name for p in paths]}
    paths.append(write_json(out / "run.json", doc))
    for p in paths:
        log.info("wrote %s", p)
    return paths


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="escape-lab", description="Run an escape_lab manifest.")
    ap.add_argument("--manifest", required=True, help="JSON run manifest")
    ap.add_argument("--output", default=None, help="output directory (overrides the manifest)")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker threads, 0 = auto (ESCAPE_LAB_THREADS or CPU count)")
    ap.add_argument("--seed", type=int, default=None, help="master seed (unsigned 64-bit)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads is not None and args.threads < 0:
        log.error("--threads must be non-negative")
        return EXIT_MANIFEST
    try:
        m = load_manifest(args.manifest, args.seed, args.output)
    except ManifestInvalid as exc:
        log.error("invalid manifest: %s", exc)
        return EXIT_MANIFEST
    except OSError as exc:
        log.error("cannot read manifest: %s", exc)
        return EXIT_IO
    threads = None if not args.threads else args.threads
    try:
        run(m, threads)
    except ManifestInvalid as exc:
        log.error("invalid manifest: %s", exc)
        return EXIT_MANIFEST
    except (OSError, FormatVersionError) as exc:
        log.error("i/o error: %s", exc)
        return EXIT_IO
    except COMPUTE_ERRORS as exc:
        log.error("computation failed: %s", exc)
        return EXIT_COMPUTE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
