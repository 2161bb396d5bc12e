"""Markov jump simulation of the charge dynamics and its master-equation oracle.

Two simulation modes share the segment-wise exact sampler:

``"full"``
    three states, every optical cycle is a jump and every
    ``BRIGHT_EXCITED -> BRIGHT_GROUND`` decay is an emission.
``"reduced"`` (default)
    the excited manifold is adiabatically eliminated.  The bright manifold is
    reported as ``BRIGHT_GROUND`` and photons are realized at detection time
    as a Poisson process with the segment's emission rate.

Segment boundaries truncate the pending exponential wait and redraw under
the new rates, which is exact by memorylessness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import expm

from .model import (
    ChargeModelParams,
    ChargeState,
    RateSet,
    build_rates,
    effective_rates,
)
from .sequence import PulseSequence, require_valid

__all__ = [
    "Trajectory",
    "EnsembleResult",
    "derive_seed",
    "block_generator",
    "segment_rates",
    "simulate_trajectory",
    "simulate_ensemble",
    "stochastic_expm",
    "propagate_populations",
    "bright_population",
    "expected_count_rate",
    "steady_state",
]

ZPL, PSB = 0, 1
MODES = ("reduced", "full")
DEFAULT_BLOCK = 8192


def derive_seed(master: int, *key: int) -> np.random.SeedSequence:
    """Counter-style child seed: a pure function of ``(master, *key)``."""
    return np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key))


def block_generator(master: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *key)))


def _as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def segment_rates(seq: PulseSequence, params: ChargeModelParams) -> list[RateSet]:
    """Rate set for every played segment (trailing gap included)."""
    return [build_rates(s.channels, s.voltage, params) for s in seq.timeline()]


@dataclass
class Trajectory:
    """One repetition of a sequence.

    ``jump_times``/``jump_states`` list every state change (ns, new state).
    ``emission_times``/``emission_bands`` are filled in full mode only; in
    reduced mode ``psb_rates`` holds the PSB emission rate (Hz) while bright
    for each played segment.
    """

    initial_state: ChargeState
    jump_times: np.ndarray
    jump_states: np.ndarray
    emission_times: np.ndarray
    emission_bands: np.ndarray
    period: int
    boundaries: np.ndarray
    mode: str = "reduced"
    psb_rates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def jumps(self) -> list[tuple[float, ChargeState]]:
        return [(float(t), ChargeState(int(s))) for t, s in zip(self.jump_times, self.jump_states)]

    @property
    def emissions(self) -> list[tuple[float, str]]:
        names = ("ZPL", "PSB")
        return [(float(t), names[b]) for t, b in zip(self.emission_times, self.emission_bands)]

    def state_at(self, t: float) -> ChargeState:
        i = np.searchsorted(self.jump_times, t, side="right")
        return ChargeState(int(self.jump_states[i - 1])) if i else self.initial_state

    def bright_intervals(self) -> np.ndarray:
        """``(k, 2)`` array of [start, stop) ns while in a bright state."""
        times = np.concatenate([[0.0], self.jump_times, [float(self.period)]])
        states = np.concatenate([[int(self.initial_state)], self.jump_states])
        bright = states != ChargeState.DARK
        starts, stops = times[:-1][bright], times[1:][bright]
        keep = stops > starts
        return np.column_stack([starts[keep], stops[keep]])


def _reduced_generator(rates: RateSet) -> np.ndarray:
    eff = effective_rates(rates)
    # index 0: bright manifold, 1: dark
    return np.array([[-eff.bright_to_dark, eff.bright_to_dark],
                     [eff.dark_to_bright, -eff.dark_to_bright]])


class _Exponentials:
    """Buffered standard exponentials/uniforms to keep the event loop cheap."""

    def __init__(self, rng: np.random.Generator, size: int = 4096):
        self.rng, self.size = rng, size
        self._e = self._u = np.empty(0)
        self._ie = self._iu = 0

    def exp(self) -> float:
        if self._ie >= self._e.size:
            self._e, self._ie = self.rng.standard_exponential(self.size), 0
        self._ie += 1
        return self._e[self._ie - 1]

    def uniform(self) -> float:
        if self._iu >= self._u.size:
            self._u, self._iu = self.rng.random(self.size), 0
        self._iu += 1
        return self._u[self._iu - 1]


def simulate_trajectory(seq: PulseSequence, params: ChargeModelParams,
                        initial: ChargeState = ChargeState.DARK, seed=0,
                        mode: str = "reduced") -> Trajectory:
    """Sample one repetition of ``seq`` exactly.

    The result is a deterministic function of the arguments.
    """
    require_valid(seq)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    initial = ChargeState.parse(initial)
    draws = _Exponentials(_as_generator(seed))
    bounds = seq.boundaries().astype(float)
    rates = segment_rates(seq, params)
    zpl = params.zpl_branching

    if mode == "reduced":
        gens = [_reduced_generator(r) for r in rates]
        to_label = (int(ChargeState.BRIGHT_GROUND), int(ChargeState.DARK))
        state = 1 if initial == ChargeState.DARK else 0
    else:
        gens = [r.generator() for r in rates]
        to_label = (0, 1, 2)
        state = int(initial)

    jt, js, et, eb = [], [], [], []
    for k, q in enumerate(gens):
        t, t_end = bounds[k], bounds[k + 1]
        out = -np.diag(q)
        # cumulative jump probabilities per source state
        cum = [np.cumsum(np.where(np.arange(len(q)) == i, 0.0, q[i]) / out[i]) if out[i] > 0 else None
               for i in range(len(q))]
        while True:
            total = out[state]
            if total <= 0:
                break
            t = t + draws.exp() / total * 1e9
            if t >= t_end:
                break
            nxt = int(np.searchsorted(cum[state], draws.uniform() * cum[state][-1], side="right"))
            if mode == "full" and state == ChargeState.BRIGHT_EXCITED and nxt == ChargeState.BRIGHT_GROUND:
                et.append(t)
                eb.append(ZPL if draws.uniform() < zpl else PSB)
            state = nxt
            jt.append(t)
            js.append(to_label[state])

    psb = np.array([effective_rates(r).emission_rate * (1 - zpl) for r in rates]) if mode == "reduced" \
        else np.zeros(0)
    return Trajectory(
        initial_state=initial if mode == "full" or initial == ChargeState.DARK else ChargeState.BRIGHT_GROUND,
        jump_times=np.asarray(jt, dtype=float),
        jump_states=np.asarray(js, dtype=np.int8),
        emission_times=np.asarray(et, dtype=float),
        emission_bands=np.asarray(eb, dtype=np.int8),
        period=seq.period,
        boundaries=seq.boundaries(),
        mode=mode,
        psb_rates=psb,
    )


# ---------------------------------------------------------------------------
# vectorized ensemble (reduced mode)


@dataclass
class EnsembleResult:
    """Aggregates over ``n`` independent repetitions.

    ``bright_counts[i]`` is the number of repetitions in a bright state at
    ``checkpoints[i]``; ``exposure[k]`` is the expected number of PSB
    emissions falling in bin ``k`` summed over repetitions (reduced mode) or
    the realized PSB emission count (full mode).
    """

    n: int
    checkpoints: np.ndarray
    bright_counts: np.ndarray
    bin_edges: np.ndarray | None
    exposure: np.ndarray | None
    mode: str = "reduced"

    @property
    def bright_fraction(self) -> np.ndarray:
        return self.bright_counts / self.n


def _split_timeline(seq: PulseSequence, params: ChargeModelParams, checkpoints: np.ndarray):
    bounds = seq.boundaries().astype(float)
    rates = segment_rates(seq, params)
    b2d = np.array([effective_rates(r).bright_to_dark for r in rates]) * 1e-9
    d2b = np.array([effective_rates(r).dark_to_bright for r in rates]) * 1e-9
    psb = np.array([effective_rates(r).emission_rate for r in rates]) * (1 - params.zpl_branching) * 1e-9
    cuts = np.unique(np.concatenate([bounds, checkpoints]))
    seg = np.clip(np.searchsorted(bounds, cuts[:-1], side="right") - 1, 0, len(rates) - 1)
    return cuts, b2d[seg], d2b[seg], psb[seg]


def _run_block(task) -> tuple[np.ndarray, np.ndarray | None]:
    cuts, b2d, d2b, psb, n, seed_key, initial_bright, checkpoints, bin_edges = task
    rng = block_generator(*seed_key)
    bright = np.full(n, initial_bright, dtype=bool)
    cp_counts = np.zeros(len(checkpoints), dtype=np.int64)
    cp_index = {float(c): i for i, c in enumerate(checkpoints)}
    ev_t = [np.zeros(int(bright.sum()))]
    ev_s = [np.ones(int(bright.sum()))]

    for s in range(len(cuts) - 1):
        t0, t1 = cuts[s], cuts[s + 1]
        if t0 in cp_index:
            cp_counts[cp_index[t0]] = bright.sum()
        idx = np.arange(n)
        t = np.full(n, t0)
        a, c = b2d[s], d2b[s]
        while idx.size:
            rate = np.where(bright[idx], a, c)
            with np.errstate(divide="ignore"):
                tn = t + rng.standard_exponential(idx.size) / rate
            jump = tn < t1
            idx, t = idx[jump], tn[jump]
            if not idx.size:
                break
            bright[idx] = ~bright[idx]
            ev_t.append(t)
            ev_s.append(np.where(bright[idx], 1.0, -1.0))
    period = cuts[-1]
    if period in cp_index:
        cp_counts[cp_index[period]] = bright.sum()
    ev_t.append(np.full(int(bright.sum()), period))
    ev_s.append(-np.ones(int(bright.sum())))

    exposure = None
    if bin_edges is not None:
        times, signs = np.concatenate(ev_t), np.concatenate(ev_s)
        exposure = _interval_exposure(times, signs, cuts, psb, bin_edges)
    return cp_counts, exposure


def _interval_exposure(times, signs, cuts, weight, edges) -> np.ndarray:
    """Sum over bright intervals of the integral of ``weight`` within each bin.

    Interval endpoints come as ``(time, +1)`` on entering and ``(time, -1)``
    on leaving the bright state.
    """
    cum = np.concatenate([[0.0], np.cumsum(weight * np.diff(cuts))])
    # an interval contributes C(leave) - C(enter)
    signs = -signs
    nbins = len(edges) - 1
    c_edges = np.interp(edges, cuts, cum)
    k = np.clip(np.searchsorted(edges, times, side="right") - 1, 0, nbins - 1)
    partial = np.bincount(k, weights=signs * (np.interp(times, cuts, cum) - c_edges[k]), minlength=nbins)
    per_bin = np.bincount(k, weights=signs, minlength=nbins)
    # an endpoint in bin k contributes the full integral of every earlier bin
    below = np.concatenate([np.cumsum(per_bin[::-1])[::-1][1:], [0.0]])
    # cancellation between endpoint terms can leave tiny negative residues
    return np.maximum(below * np.diff(c_edges) + partial, 0.0)


def simulate_ensemble(seq: PulseSequence, params: ChargeModelParams, n: int, seed: int,
                      initial: ChargeState = ChargeState.DARK,
                      checkpoints: Sequence[float] = (),
                      bin_edges: np.ndarray | None = None,
                      mode: str = "reduced",
                      block_size: int = DEFAULT_BLOCK,
                      map_fn: Callable = map) -> EnsembleResult:
    """Simulate ``n`` independent repetitions in fixed-size seeded blocks.

    Block ``b`` draws from ``derive_seed(seed, 0, b)``, so the result does not
    depend on ``map_fn`` (serial ``map`` or an executor's ``map``).
    """
    require_valid(seq)
    checkpoints = np.asarray(sorted(float(c) for c in checkpoints), dtype=float)
    if checkpoints.size and (checkpoints[0] < 0 or checkpoints[-1] > seq.period):
        raise ValueError("checkpoints must lie within the sequence period")
    initial = ChargeState.parse(initial)
    edges = None if bin_edges is None else np.asarray(bin_edges, dtype=float)

    if mode == "full":
        return _full_ensemble(seq, params, n, seed, initial, checkpoints, edges)
    if mode != "reduced":
        raise ValueError(f"mode must be one of {MODES}")

    cuts, b2d, d2b, psb = _split_timeline(seq, params, checkpoints)
    init_bright = initial != ChargeState.DARK
    sizes = [block_size] * (n // block_size) + ([n % block_size] if n % block_size else [])
    tasks = [(cuts, b2d, d2b, psb, m, (seed, 0, b), init_bright, checkpoints, edges)
             for b, m in enumerate(sizes)]
    counts = np.zeros(len(checkpoints), dtype=np.int64)
    exposure = None if edges is None else np.zeros(len(edges) - 1)
    for cp, ex in map_fn(_run_block, tasks):
        counts += cp
        if ex is not None:
            exposure += ex
    return EnsembleResult(n, checkpoints, counts, edges, exposure)


def _full_ensemble(seq, params, n, seed, initial, checkpoints, edges) -> EnsembleResult:
    counts = np.zeros(len(checkpoints), dtype=np.int64)
    exposure = None if edges is None else np.zeros(len(edges) - 1)
    for i in range(n):
        traj = simulate_trajectory(seq, params, initial, derive_seed(seed, 0, i), mode="full")
        for j, c in enumerate(checkpoints):
            counts[j] += traj.state_at(c) != ChargeState.DARK
        if edges is not None:
            psb = traj.emission_times[traj.emission_bands == PSB]
            exposure += np.histogram(psb, bins=edges)[0]
    return EnsembleResult(n, checkpoints, counts, edges, exposure, mode="full")


# ---------------------------------------------------------------------------
# master-equation oracle


def _stochastic_fix(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 0.0, None)
    np.fill_diagonal(p, 0.0)
    np.fill_diagonal(p, 1.0 - p.sum(axis=1))
    return p


def stochastic_expm(q: np.ndarray, t: float) -> np.ndarray:
    """``exp(q t)`` for a generator ``q`` by scaling and squaring.

    Diagonals are re-derived from the off-diagonal mass after every squaring,
    which keeps rows summing to one even when rates span ten decades.
    """
    q = np.asarray(q, dtype=float)
    norm = float(np.max(np.abs(np.diag(q)))) * t
    if norm == 0.0:
        return np.eye(len(q))
    s = max(0, int(np.ceil(np.log2(norm / 0.25))))
    p = _stochastic_fix(expm(q * (t / 2.0 ** s)))
    for _ in range(s):
        p = _stochastic_fix(p @ p)
    return p


def propagate_populations(seq: PulseSequence, params: ChargeModelParams, initial,
                          grid: int | float, mode: str = "full") -> tuple[np.ndarray, np.ndarray]:
    """Solve the master equation over one repetition, sampled every ``grid`` ns.

    Returns ``(times_ns, populations)`` with ``populations[i]`` the vector at
    ``times_ns[i]``.  ``mode="full"`` uses the three-state generator;
    ``"reduced"`` the two-state bright/dark one (vectors of length 2).
    """
    require_valid(seq)
    if grid <= 0:
        raise ValueError("grid step must be > 0")
    p = np.asarray(initial, dtype=float).copy()
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"initial population must sum to 1, got {p.sum()!r}")
    rates = segment_rates(seq, params)
    gens = [r.generator() if mode == "full" else _reduced_generator(r) for r in rates]
    if len(p) != len(gens[0]):
        raise ValueError(f"initial vector has {len(p)} entries, expected {len(gens[0])}")
    bounds = seq.boundaries().astype(float)
    period = float(seq.period)
    times = np.arange(0.0, period + 0.5 * grid, float(grid))
    times = times[times <= period]
    out = np.empty((len(times), len(p)))
    cache: dict[tuple[int, float], np.ndarray] = {}

    def step(k, dt):
        key = (k, dt)
        if key not in cache:
            cache[key] = stochastic_expm(gens[k], dt * 1e-9)
        return cache[key]

    t, k = 0.0, 0
    for i, target in enumerate(times):
        while t < target:
            while k < len(gens) - 1 and bounds[k + 1] <= t:
                k += 1
            stop = min(target, bounds[k + 1])
            p = p @ step(k, stop - t)
            t = stop
        out[i] = p
    return times, out


def bright_population(pops: np.ndarray) -> np.ndarray:
    """Bright share of full (3-column) or reduced (2-column) population arrays."""
    pops = np.atleast_2d(pops)
    return pops[:, 0] if pops.shape[1] == 2 else pops[:, 0] + pops[:, 1]


def steady_state(q: np.ndarray) -> np.ndarray:
    """Stationary distribution of generator ``q``."""
    n = len(q)
    a = np.vstack([q.T, np.ones(n)])
    b = np.concatenate([np.zeros(n), [1.0]])
    return np.linalg.lstsq(a, b, rcond=None)[0]


def expected_count_rate(p, channels, params: ChargeModelParams, detector) -> float:
    """Mean detected rate (Hz) for population ``p`` (PSB band only plus dark counts).

    ``channels`` is accepted for interface symmetry; the emission rate follows
    from the excited-state population alone.
    """
    p = np.asarray(p, dtype=float)
    p_exc = p[ChargeState.BRIGHT_EXCITED]
    return detector.efficiency * params.gamma_rad * (1 - params.zpl_branching) * p_exc + detector.dark_rate
