"""Execute experiment configs into artifact directories and replay them."""

from __future__ import annotations

import hashlib
import json
import math
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    FitError,
    SweepRun,
    fit_exponential,
    fit_lorentzian,
    recovery_point,
    sweep_summary,
)
from .analysis.summary import InconsistentSweepError, SweepTable
from .config import ExperimentConfig, load_config, parse_config
from .photonics import Histogram, simulate_histogram, window_intensity
from .profiles import profiles_version

__all__ = ["RunOutcome", "ReplayReport", "run_experiment", "replay", "run_seed"]

MANIFEST = "manifest.json"
MANIFEST_FORMAT = 1


def run_seed(master: int, index: int) -> int:
    """Seed of sweep point ``index``; independent of scheduling."""
    state = np.random.SeedSequence(master, spawn_key=(7, index)).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json(obj) -> str:
    def clean(x):
        if isinstance(x, float) and not math.isfinite(x):
            return None
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        return x
    return json.dumps(clean(obj), indent=2, sort_keys=True) + "\n"


@contextmanager
def _pool(workers: int):
    if workers <= 1:
        yield None
        return
    with ProcessPoolExecutor(max_workers=workers) as ex:
        yield ex


def _simulate(task):
    index, seq, params, det, reps, seed, bin_width, initial, mode, block_map = task
    try:
        h = simulate_histogram(seq, params, det, reps, seed, bin_width, initial, mode,
                               map_fn=block_map or map)
    except Exception as exc:  # recorded in the manifest, never dropped
        return index, None, f"{type(exc).__name__}: {exc}"
    return index, h, None


def _fit_run(seq, h: Histogram, do_fit: bool) -> dict:
    m = seq.markers
    report: dict = {}
    if "I1_init" in m:
        report["recovery"] = recovery_point(h, seq).to_dict()
    elif "readout" in m and do_fit:
        try:
            report["decay"] = fit_exponential(h, seq.window("readout")).to_dict()
        except (FitError, ValueError) as exc:
            report["decay"] = {"error": str(exc)}
    if "scan" in m:
        rate, err = window_intensity(h, *seq.window("scan"))
        report["scan"] = {"rate_hz": rate, "rate_err_hz": err}
    return report


def _ple_summary(cfg: ExperimentConfig, done: list) -> tuple[SweepTable, list[dict]]:
    """Scan table plus one Lorentzian fit per combination of the other axes."""
    rows, groups = [], {}
    for rs, _, report in done:
        row = {**rs.axes, "rate_hz": report["scan"]["rate_hz"], "rate_err_hz": report["scan"]["rate_err_hz"]}
        rows.append(row)
        key = tuple((k, v) for k, v in rs.axes.items() if k != "detuning")
        groups.setdefault(key, []).append((float(rs.axes.get("detuning", 0.0)), row["rate_hz"], row["rate_err_hz"]))
    fits = []
    for key, pts in groups.items():
        entry = {"axes": dict(key)}
        if len(pts) >= 7 and cfg.fit:
            try:
                entry["lorentzian"] = fit_lorentzian(sorted(pts)).to_dict()
            except (FitError, ValueError) as exc:
                entry["lorentzian"] = {"error": str(exc)}
        fits.append(entry)
    table = SweepTable("detuning", [{"value": r.get("detuning", 0.0), **r} for r in rows])
    return table, fits


@dataclass
class RunOutcome:
    out_dir: Path
    manifest: dict
    failures: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def run_experiment(cfg: ExperimentConfig | str | Path, out: str | Path | None = None,
                   workers: int = 1, seed: int | None = None) -> RunOutcome:
    """Simulate every sweep point of ``cfg`` and write the artifact directory.

    Layout: ``config.cfg``, ``histograms/run_NNN.csv`` (+ ``.json`` sidecar),
    ``fits.json``, ``summary.csv``, ``summary_long.csv``, ``summary.json`` and
    ``manifest.json`` with the SHA-256 of every other file.
    """
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    if seed is not None:
        cfg = ExperimentConfig(**{**cfg.__dict__, "seed": int(seed)})
    out_dir = Path(out or cfg.output or f"out/{cfg.name}")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "histograms").mkdir(exist_ok=True)
    (out_dir / "config.cfg").write_text(cfg.dump())
    written = ["config.cfg"]

    params, det = cfg.model_params(), cfg.detector_params()
    specs = cfg.runs()
    results: dict[int, tuple] = {}
    with _pool(workers) as ex:
        # a lone run spreads its seeded blocks over the pool instead
        block_map = ex.map if (ex is not None and len(specs) == 1) else None
        tasks = [(s.index, s.sequence, params, det, cfg.repetitions, run_seed(cfg.seed, s.index),
                  cfg.bin_width, cfg.initial(), cfg.mode, block_map) for s in specs]
        mapper = ex.map if (ex is not None and block_map is None) else map
        for index, h, err in mapper(_simulate, tasks):
            results[index] = (h, err)

    runs_meta, failures, done = [], [], []
    for rs in specs:
        h, err = results[rs.index]
        entry = {"index": rs.index, "axes": rs.axes, "seed": run_seed(cfg.seed, rs.index),
                 "label": rs.sequence.label}
        if err is not None:
            entry.update(status="failed", error=err)
            failures.append(entry)
        else:
            name = f"histograms/run_{rs.index:03d}.csv"
            h.write(out_dir / name, axes=rs.axes, config=cfg.name)
            written += [name, name[:-4] + ".json"]
            report = _fit_run(rs.sequence, h, cfg.fit)
            entry.update(status="ok", histogram=name)
            done.append((rs, h, report))
        runs_meta.append(entry)

    fits = {f"run_{s.index:03d}": {"axes": s.axes, **r} for s, _, r in done}
    summary_error = None
    table = None
    if done:
        try:
            if cfg.protocol_name == "ple":
                table, line_fits = _ple_summary(cfg, done)
                fits["lines"] = line_fits
            else:
                axis = next((k for k, v in cfg.sweep.items() if len(v) > 1), next(iter(cfg.sweep), "run"))
                table = sweep_summary([SweepRun(s.axes.get(axis, s.index), h, s.sequence, cfg.fit)
                                       for s, h, _ in done], axis)
                for row, (s, _, _) in zip(table.rows, done):
                    extra = {k: v for k, v in s.axes.items() if k != axis}
                    row.update(extra)
        except (InconsistentSweepError, KeyError, ValueError) as exc:
            summary_error = str(exc)
    (out_dir / "fits.json").write_text(_json(fits))
    written.append("fits.json")
    if table is not None:
        (out_dir / "summary.csv").write_text(table.to_csv())
        (out_dir / "summary_long.csv").write_text(table.to_long_csv())
        (out_dir / "summary.json").write_text(table.to_json())
        written += ["summary.csv", "summary_long.csv", "summary.json"]

    outputs = {name: _sha256(out_dir / name) for name in sorted(written)}
    manifest = {
        "format": MANIFEST_FORMAT,
        "tool": "sivcharge",
        "version": __version__,
        "profiles_version": profiles_version(),
        "config_sha256": cfg.digest(),
        # YAML text keeps the sweep axis order, which defines run indices
        "config": cfg.dump(),
        "seed": cfg.seed,
        "param_hash": params.digest(),
        "runs": runs_meta,
        "failures": len(failures),
        "summary_error": summary_error,
        "outputs": outputs,
    }
    (out_dir / MANIFEST).write_text(_json(manifest))
    return RunOutcome(out_dir, manifest, failures)


@dataclass
class ReplayReport:
    out_dir: Path
    identical: bool
    divergences: list[str]
    version_mismatch: str | None = None

    def lines(self) -> list[str]:
        out = []
        if self.version_mismatch:
            out.append(f"version mismatch: {self.version_mismatch}")
        out.extend(f"diverged: {d}" for d in self.divergences)
        out.append("replay identical" if self.identical else f"replay diverged in {len(self.divergences)} item(s)")
        return out


def replay(manifest_path: str | Path, out: str | Path | None = None, workers: int = 1) -> ReplayReport:
    """Re-run a recorded experiment and compare every output byte for byte.

    The recorded seed, not the seed inside the embedded config, drives the
    rerun, so a tampered seed shows up as diverging files.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST
    manifest = json.loads(manifest_path.read_text())
    mismatch = None
    if manifest.get("version") != __version__ or manifest.get("profiles_version") != profiles_version():
        mismatch = (f"recorded version {manifest.get('version')} (profiles v{manifest.get('profiles_version')}), "
                    f"running {__version__} (profiles v{profiles_version()})")
    cfg = parse_config(manifest["config"], f"{manifest_path}:config")
    divergences = []
    if cfg.digest() != manifest.get("config_sha256"):
        divergences.append("embedded config does not match its recorded hash")
    tmp = None
    if out is None:
        tmp = tempfile.mkdtemp(prefix="sivcharge-replay-")
        out = tmp
    result = run_experiment(cfg, out, workers=workers, seed=int(manifest["seed"]))
    recorded = manifest.get("outputs", {})
    produced = result.manifest["outputs"]
    for name in sorted(set(recorded) | set(produced)):
        if name not in produced:
            divergences.append(f"{name}: missing from replay")
        elif name not in recorded:
            divergences.append(f"{name}: not in recorded manifest")
        elif recorded[name] != produced[name]:
            divergences.append(f"{name}: sha256 {produced[name][:12]} != recorded {recorded[name][:12]}")
    report = ReplayReport(Path(out), not divergences, divergences, mismatch)
    if tmp is not None:
        shutil.rmtree(tmp, ignore_errors=True)
    return report
