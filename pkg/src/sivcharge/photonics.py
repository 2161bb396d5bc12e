"""Detector model, time tags and sequence-synchronized histograms."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .engine import (
    PSB,
    Trajectory,
    block_generator,
    derive_seed,
    propagate_populations,
    bright_population,
    segment_rates,
    simulate_ensemble,
    simulate_trajectory,
)
from .model import ChargeModelParams, ChargeState, effective_rates
from .sequence import PulseSequence, us

__all__ = [
    "DetectorParams",
    "TimeTagStream",
    "Histogram",
    "detect",
    "accumulate",
    "window_intensity",
    "simulate_histogram",
    "expected_histogram",
    "DEFAULT_BIN_WIDTH",
]

DEFAULT_BIN_WIDTH = us(100)


@dataclass(frozen=True)
class DetectorParams:
    """PSB-band detection: overall efficiency, dark count rate (Hz), dead time (ns)."""

    efficiency: float = 0.09
    dark_rate: float = 700.0
    dead_time: float = 0.0

    def __post_init__(self):
        if not 0 <= self.efficiency <= 1:
            raise ValueError(f"efficiency must lie in [0, 1], got {self.efficiency}")
        if self.dark_rate < 0:
            raise ValueError("dark_rate must be >= 0")
        if self.dead_time < 0:
            raise ValueError("dead_time must be >= 0")

    def to_dict(self) -> dict:
        return {"efficiency": self.efficiency, "dark_rate_hz": self.dark_rate, "dead_time_ns": self.dead_time}

    @classmethod
    def from_dict(cls, d) -> "DetectorParams":
        allowed = {"efficiency", "dark_rate_hz", "dead_time_ns"}
        extra = set(d) - allowed
        if extra:
            raise ValueError(f"unknown detector field(s): {sorted(extra)}")
        return cls(float(d.get("efficiency", 0.09)), float(d.get("dark_rate_hz", 700.0)),
                   float(d.get("dead_time_ns", 0.0)))


@dataclass
class TimeTagStream:
    """Detection times (ns from the start of their own repetition)."""

    tags: np.ndarray
    repetition_index: np.ndarray
    total_repetitions: int
    period: int

    def __post_init__(self):
        self.tags = np.asarray(self.tags, dtype=float)
        self.repetition_index = np.asarray(self.repetition_index, dtype=np.int64)

    def __len__(self):
        return len(self.tags)


def _apply_dead_time(tags: np.ndarray, dead: float) -> np.ndarray:
    if dead <= 0 or tags.size < 2:
        return tags
    keep = np.zeros(tags.size, dtype=bool)
    last = -math.inf
    for i, t in enumerate(tags):
        if t - last >= dead:
            keep[i] = True
            last = t
    return tags[keep]


def detect(traj: Trajectory, det: DetectorParams, seed) -> TimeTagStream:
    """Turn one trajectory into detector clicks for a single repetition."""
    rng = np.random.Generator(np.random.PCG64(seed if isinstance(seed, np.random.SeedSequence)
                                              else np.random.SeedSequence(int(seed))))
    period = float(traj.period)
    if traj.mode == "full":
        psb = traj.emission_times[traj.emission_bands == PSB]
        signal = psb[rng.random(psb.size) < det.efficiency]
    else:
        pieces = []
        bounds = traj.boundaries.astype(float)
        for a, b in traj.bright_intervals():
            # split the bright interval on segment edges; rates are constant within each piece
            edges = np.concatenate([[a], bounds[(bounds > a) & (bounds < b)], [b]])
            for lo, hi in zip(edges[:-1], edges[1:]):
                k = min(int(np.searchsorted(bounds, lo, side="right")) - 1, len(traj.psb_rates) - 1)
                lam = det.efficiency * traj.psb_rates[k] * (hi - lo) * 1e-9
                n = rng.poisson(lam)
                if n:
                    pieces.append(rng.uniform(lo, hi, n))
        signal = np.concatenate(pieces) if pieces else np.zeros(0)
    n_dark = rng.poisson(det.dark_rate * period * 1e-9)
    dark = rng.uniform(0.0, period, n_dark)
    tags = np.sort(np.concatenate([signal, dark]))
    tags = _apply_dead_time(tags, det.dead_time)
    return TimeTagStream(tags, np.zeros(tags.size, dtype=np.int64), 1, traj.period)


@dataclass
class Histogram:
    """Counts per bin over one sequence period, summed over repetitions.

    Bins tile ``[0, period)`` with width ``bin_width``; the last one may be short.
    """

    bin_width: int
    counts: np.ndarray
    total_repetitions: int
    period: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        expected = -(-self.period // self.bin_width)
        if self.counts.shape != (expected,):
            raise ValueError(f"expected {expected} bins for period {self.period} ns, got {self.counts.shape}")

    @classmethod
    def empty(cls, period: int, bin_width: int = DEFAULT_BIN_WIDTH) -> "Histogram":
        return cls(int(bin_width), np.zeros(-(-period // bin_width), dtype=np.int64), 0, int(period))

    @property
    def edges(self) -> np.ndarray:
        e = np.arange(0, self.period, self.bin_width, dtype=np.int64)
        return np.concatenate([e, [self.period]])

    @property
    def bin_starts(self) -> np.ndarray:
        return self.edges[:-1]

    @property
    def bin_lengths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def rates(self) -> np.ndarray:
        """Count rate per bin (Hz)."""
        return self.counts / (max(self.total_repetitions, 1) * self.bin_lengths * 1e-9)

    @property
    def rate_errors(self) -> np.ndarray:
        return np.sqrt(self.counts) / (max(self.total_repetitions, 1) * self.bin_lengths * 1e-9)

    def merge(self, other: "Histogram") -> "Histogram":
        if (other.period, other.bin_width) != (self.period, self.bin_width):
            raise ValueError("cannot merge histograms with different period or bin width")
        return Histogram(self.bin_width, self.counts + other.counts,
                         self.total_repetitions + other.total_repetitions, self.period, dict(self.meta))

    def rebin(self, factor: int) -> "Histogram":
        edges = self.edges
        idx = np.arange(0, len(self.counts), factor)
        counts = np.add.reduceat(self.counts, idx)
        out = Histogram(self.bin_width * factor, counts, self.total_repetitions, self.period, dict(self.meta))
        assert np.array_equal(out.edges[:-1], edges[idx])
        return out

    def window_intensity(self, start: float, stop: float) -> tuple[float, float]:
        return window_intensity(self, start, stop)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_start_ns", "counts", "rate_hz", "rate_err_hz"])
        for b, c, r, e in zip(self.bin_starts, self.counts, self.rates, self.rate_errors):
            w.writerow([int(b), int(c), repr(float(r)), repr(float(e))])
        return buf.getvalue()

    def sidecar(self, **extra) -> dict:
        d = {"bin_width_ns": self.bin_width, "period_ns": self.period,
             "repetitions": self.total_repetitions, **self.meta, **extra}
        return d

    def write(self, path: str | Path, **extra) -> tuple[Path, Path]:
        path = Path(path)
        path.write_text(self.to_csv())
        side = path.with_suffix(".json")
        side.write_text(json.dumps(self.sidecar(**extra), indent=2, sort_keys=True) + "\n")
        return path, side

    @classmethod
    def read(cls, path: str | Path) -> "Histogram":
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        meta = {k: v for k, v in side.items() if k not in ("bin_width_ns", "period_ns", "repetitions")}
        return cls(int(side["bin_width_ns"]), data[:, 1].astype(np.int64), int(side["repetitions"]),
                   int(side["period_ns"]), meta)


def accumulate(streams: Iterable[TimeTagStream], bin_width: int = DEFAULT_BIN_WIDTH,
               period: int | None = None) -> Histogram:
    """Bin tags of many repetitions into one period-synchronized histogram."""
    streams = list(streams)
    if period is None:
        if not streams:
            raise ValueError("period is required when no streams are given")
        period = streams[0].period
    hist = Histogram.empty(int(period), int(bin_width))
    for s in streams:
        if s.period != period:
            raise ValueError(f"stream period {s.period} ns does not match histogram period {period} ns")
        idx = np.floor(s.tags / bin_width).astype(np.int64)
        hist.counts += np.bincount(idx, minlength=len(hist.counts))[: len(hist.counts)]
        hist.total_repetitions += s.total_repetitions
    return hist


def window_intensity(h: Histogram, start: float, stop: float) -> tuple[float, float]:
    """Mean raw rate (Hz) over ``[start, stop)`` ns and its Poisson error.

    Bins partly inside the window count in proportion to their overlap.
    """
    if not 0 <= start < stop <= h.period:
        raise ValueError(f"empty or out-of-range window [{start}, {stop}) for period {h.period}")
    edges = h.edges.astype(float)
    overlap = np.clip(np.minimum(edges[1:], stop) - np.maximum(edges[:-1], start), 0, None)
    n = float(np.sum(h.counts * overlap / h.bin_lengths))
    exposure = max(h.total_repetitions, 1) * (stop - start) * 1e-9
    return n / exposure, math.sqrt(n) / exposure


def simulate_histogram(seq: PulseSequence, params: ChargeModelParams, detector: DetectorParams,
                       repetitions: int, seed: int, bin_width: int = DEFAULT_BIN_WIDTH,
                       initial: ChargeState = ChargeState.DARK, mode: str = "reduced",
                       map_fn: Callable = map, block_size: int | None = None) -> Histogram:
    """Synthetic TCSPC histogram of ``repetitions`` independent repetitions.

    Without dead time the per-bin counts are drawn directly from their exact
    law: a Poisson variate whose mean is the trajectory-summed detected
    emission plus dark counts.  With dead time every repetition is detected
    tag by tag.
    """
    hist = Histogram.empty(seq.period, bin_width)
    edges = hist.edges.astype(float)
    rng = block_generator(seed, 1)
    if detector.dead_time > 0:
        streams = (
            detect(simulate_trajectory(seq, params, initial, derive_seed(seed, 0, i), mode),
                   detector, derive_seed(seed, 1, i))
            for i in range(repetitions)
        )
        out = accumulate(streams, bin_width, seq.period)
    else:
        kw = {} if block_size is None else {"block_size": block_size}
        ens = simulate_ensemble(seq, params, repetitions, seed, initial, bin_edges=edges,
                                mode=mode, map_fn=map_fn, **kw)
        if ens.mode == "full":
            signal = rng.binomial(ens.exposure.astype(np.int64), detector.efficiency)
        else:
            signal = rng.poisson(detector.efficiency * ens.exposure)
        dark = rng.poisson(detector.dark_rate * np.diff(edges) * 1e-9 * repetitions)
        out = Histogram(hist.bin_width, (signal + dark).astype(np.int64), repetitions, seq.period)
    out.meta.update({"label": seq.label, "seed": int(seed), "param_hash": params.digest()})
    return out


def expected_histogram(seq: PulseSequence, params: ChargeModelParams, detector: DetectorParams,
                       repetitions: int, bin_width: int = DEFAULT_BIN_WIDTH,
                       initial: ChargeState = ChargeState.DARK, substeps: int = 20) -> np.ndarray:
    """Expected counts per bin from the three-state master equation.

    The bright population is integrated with the trapezoid rule on a grid of
    ``bin_width / substeps``; inside each segment the excited share of the
    bright manifold is its quasi-steady value.
    """
    step = bin_width / substeps
    p0 = np.zeros(3)
    p0[int(ChargeState.parse(initial))] = 1.0
    times, pops = propagate_populations(seq, params, p0, step)
    bright = bright_population(pops)
    bounds = seq.boundaries()
    coef = np.array([effective_rates(r).emission_rate for r in segment_rates(seq, params)])
    coef *= (1 - params.zpl_branching) * detector.efficiency
    mids = 0.5 * (times[1:] + times[:-1])
    seg = np.clip(np.searchsorted(bounds, mids, side="right") - 1, 0, len(coef) - 1)
    piece = coef[seg] * 0.5 * (bright[1:] + bright[:-1]) * np.diff(times) * 1e-9
    edges = Histogram.empty(seq.period, bin_width).edges
    k = np.clip(np.searchsorted(edges, mids, side="right") - 1, 0, len(edges) - 2)
    signal = np.bincount(k, weights=piece, minlength=len(edges) - 1)
    dark = detector.dark_rate * np.diff(edges) * 1e-9
    return repetitions * (signal + dark)
