"""Windowed intensities, normalized recovery and sweep tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

from ..photonics import Histogram, window_intensity
from ..sequence import PulseSequence
from .estimators import FitError
from .fits import fit_exponential

__all__ = [
    "normalized_recovery",
    "RecoveryPoint",
    "recovery_point",
    "SweepRun",
    "SweepTable",
    "sweep_summary",
    "InconsistentSweepError",
]


class InconsistentSweepError(ValueError):
    """Runs of a sweep do not share one protocol shape."""


def normalized_recovery(i1_init: float, i1_final: float, i2_init: float) -> float:
    """Fraction of the first-pulse intensity loss that is back at the second pulse."""
    loss = i1_init - i1_final
    if not loss > 0:
        raise ValueError("no loss to normalize")
    return (i2_init - i1_final) / loss


def _recovery_error(i1, e1, i1f, e1f, i2, e2) -> float:
    loss = i1 - i1f
    d_i2 = 1.0 / loss
    d_i1 = -(i2 - i1f) / loss**2
    d_i1f = (i2 - i1) / loss**2
    return math.sqrt((d_i1 * e1) ** 2 + (d_i1f * e1f) ** 2 + (d_i2 * e2) ** 2)


@dataclass
class RecoveryPoint:
    """Window intensities (Hz, raw) of a two-pulse run and the derived recovery."""

    tau2: float
    I1_init: float
    I1_init_err: float
    I1_final: float
    I1_final_err: float
    I2_init: float
    I2_init_err: float
    I2_final: float
    I2_final_err: float
    normalized_recovery: float
    normalized_recovery_err: float

    @classmethod
    def from_intensities(cls, tau2, i1_init, i1_final, i2_init, i2_final) -> "RecoveryPoint":
        """Build from ``(value, error)`` pairs; errors are propagated to first order."""
        r = normalized_recovery(i1_init[0], i1_final[0], i2_init[0])
        err = _recovery_error(*i1_init, *i1_final, *i2_init)
        return cls(float(tau2), *i1_init, *i1_final, *i2_init, *i2_final, r, err)

    def to_dict(self) -> dict:
        return asdict(self)


def _windows(h: Histogram, seq: PulseSequence, names: Iterable[str]) -> dict[str, tuple[float, float]]:
    return {n: window_intensity(h, *seq.window(n)) for n in names}


def recovery_point(h: Histogram, seq: PulseSequence, tau2: float | None = None) -> RecoveryPoint:
    """Recovery of a two-pulse histogram using the sequence's named windows.

    ``tau2`` (ms) defaults to the spacing between the two resonant pulses.
    """
    w = _windows(h, seq, ("I1_init", "I1_final", "I2_init", "I2_final"))
    if tau2 is None:
        tau2 = (seq.window("pulse2")[0] - seq.window("pulse1")[1]) * 1e-6
    return RecoveryPoint.from_intensities(tau2, w["I1_init"], w["I1_final"], w["I2_init"], w["I2_final"])


@dataclass
class SweepRun:
    """One point of a sweep: axis value, its histogram and the sequence that made it."""

    value: float
    histogram: Histogram
    sequence: PulseSequence
    fit_decay: bool = True


def _shape(seq: PulseSequence) -> tuple:
    return tuple(sorted((k, b - a) for k, (a, b) in seq.markers.items()))


def _sub(x, bg):
    return x[0] - bg[0], math.hypot(x[1], bg[1])


def _summarize(run: SweepRun) -> dict:
    seq, h = run.sequence, run.histogram
    bg = window_intensity(h, *seq.window("dark_gap"))
    row = {"value": run.value, "background_hz": bg[0], "background_err_hz": bg[1]}
    names = seq.markers
    if "I1_init" in names:
        rp = recovery_point(h, seq)
        row.update({
            "tau2_ms": rp.tau2,
            "init_hz": rp.I1_init - bg[0], "init_err_hz": math.hypot(rp.I1_init_err, bg[1]),
            "final_hz": rp.I1_final - bg[0], "final_err_hz": math.hypot(rp.I1_final_err, bg[1]),
            "i2_init_hz": rp.I2_init - bg[0], "i2_init_err_hz": math.hypot(rp.I2_init_err, bg[1]),
            "i2_final_hz": rp.I2_final - bg[0], "i2_final_err_hz": math.hypot(rp.I2_final_err, bg[1]),
            "recovery": rp.normalized_recovery, "recovery_err": rp.normalized_recovery_err,
        })
        return row
    if "readout_init" not in names:
        raise InconsistentSweepError(f"sequence {seq.label!r} has neither readout nor two-pulse windows")
    for key, name in (("probe", "probe"), ("init", "readout_init"), ("final", "readout_final")):
        if name in names:
            v, e = _sub(window_intensity(h, *seq.window(name)), bg)
            row[f"{key}_hz"], row[f"{key}_err_hz"] = v, e
    if run.fit_decay and "readout" in names:
        try:
            fit = fit_exponential(h, seq.window("readout"))
        except (FitError, ValueError) as exc:
            row["fit_error"] = str(exc)
        else:
            row["tau_ms"] = fit.params["tau_ms"]
            row["tau_err_ms"] = math.nan if fit.errors is None else fit.errors["tau_ms"]
            row["fit_converged"] = fit.converged
    return row


@dataclass
class SweepTable:
    """Rows of per-run summaries in axis order."""

    axis: str
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        cols = ["axis"]
        for r in self.rows:
            for k in r:
                if k not in cols:
                    cols.append(k)
        return cols

    def column(self, name: str) -> list:
        return [r.get(name, math.nan) for r in self.rows]

    def to_csv(self) -> str:
        cols = self.columns
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            full = {"axis": self.axis, **r}
            w.writerow([_fmt(full.get(c, "")) for c in cols])
        return buf.getvalue()

    def to_long_csv(self) -> str:
        """One ``(axis, value, quantity, estimate, error)`` line per measured quantity."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "value", "quantity", "estimate", "error"])
        for r in self.rows:
            for k, v in r.items():
                if k == "value" or k.endswith("_err_hz") or k.endswith("_err_ms") or k.endswith("_err"):
                    continue
                if not isinstance(v, float):
                    continue
                err = r.get(_err_key(k), "")
                w.writerow([self.axis, _fmt(r["value"]), k, _fmt(v), _fmt(err)])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = [{k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in r.items()}
                for r in self.rows]
        return json.dumps({"axis": self.axis, "rows": rows}, indent=2, sort_keys=True) + "\n"


def _err_key(k: str) -> str:
    for unit in ("_hz", "_ms"):
        if k.endswith(unit):
            return k[: -len(unit)] + "_err" + unit
    return k + "_err"


def _fmt(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return v


def sweep_summary(runs: Sequence[SweepRun], axis: str = "voltage_v", map_fn: Callable = map) -> SweepTable:
    """Background-subtracted window rates plus decay time or recovery per run.

    All runs must carry the same named windows with equal lengths.  Rows come
    back in the order of ``runs`` whatever ``map_fn`` does.
    """
    runs = list(runs)
    if not runs:
        raise InconsistentSweepError("no runs to summarize")
    ref = _shape(runs[0].sequence)
    widths = {r.histogram.bin_width for r in runs}
    for r in runs[1:]:
        if _shape(r.sequence) != ref:
            raise InconsistentSweepError(
                f"run at {axis}={r.value} has windows {dict(_shape(r.sequence))}, expected {dict(ref)}")
    if len(widths) > 1:
        raise InconsistentSweepError(f"runs use different bin widths: {sorted(widths)}")
    return SweepTable(axis, list(map_fn(_summarize, runs)))
