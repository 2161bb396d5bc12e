"""Built-in acceptance suite (criteria A1 to A9) against the calibrated profile."""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .analysis import ExponentialDecay, LorentzianLine, fit_exponential, fit_lorentzian, recovery_point
from .analysis.summary import SweepRun, sweep_summary
from .engine import bright_population, propagate_populations, simulate_ensemble, simulate_trajectory
from .model import ChargeModelParams, ChargeState
from .photonics import DetectorParams, Histogram, detect, simulate_histogram, window_intensity
from .profiles import load_profile
from .runner import replay, run_experiment, run_seed
from .sequence import PulseSequence, Segment, protocol_fig1, protocol_fig3, protocol_ple

__all__ = ["CriterionResult", "CRITERIA", "run_suite", "shipped_configs"]


@dataclass
class CriterionResult:
    key: str
    title: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{self.key} {'PASS' if self.passed else 'FAIL'} {self.title}: {self.detail} ({self.seconds:.1f} s)"


def shipped_configs() -> list[Path]:
    """Experiment files shipped next to the package source (empty if not found)."""
    here = Path(str(resources.files("sivcharge"))).resolve()
    for root in (here.parent.parent / "configs", Path.cwd() / "configs"):
        if root.is_dir():
            return sorted(root.glob("*.cfg"))
    return []


def _profile() -> ChargeModelParams:
    return load_profile("emitter_a")


# -- A1 -----------------------------------------------------------------------


def _oracle_check(seq: PulseSequence, params, n: int, seed: int) -> tuple[float, str]:
    grid = 100_000  # 100 us
    steps = seq.period // grid
    checkpoints = np.array([round((j + 0.5) * steps / 10) * grid for j in range(10)], dtype=float)
    p0 = np.array([0.0, 0.0, 1.0])
    times, pops = propagate_populations(seq, params, p0, grid)
    exact = bright_population(pops)[np.searchsorted(times, checkpoints)]
    ens = simulate_ensemble(seq, params, n, seed, ChargeState.DARK, checkpoints=checkpoints)
    frac = ens.bright_fraction
    pc = np.clip(exact, 1.0 / n, 1 - 1.0 / n)
    z = np.abs(frac - exact) / np.sqrt(pc * (1 - pc) / n)
    return float(z.max()), ", ".join(f"{e:.3f}" for e in exact[::3])


def a1_oracle(n: int = 100_000, **_) -> tuple[bool, str]:
    params = _profile()
    cases = {
        "fig1": protocol_fig1(voltage=0.0),
        "fig2@50V": protocol_fig1(voltage=50.0),
        "fig3": protocol_fig3(tau2=10.0, near_resonant_on=True, voltage=50.0),
    }
    worst, parts = 0.0, []
    for i, (name, seq) in enumerate(cases.items()):
        z, _ = _oracle_check(seq, params, n, 100 + i)
        worst = max(worst, z)
        parts.append(f"{name} max|z|={z:.2f}")
    return worst <= 4.0, f"N={n}; " + "; ".join(parts)


# -- A2 -----------------------------------------------------------------------


def a2_linearity(reps: int = 50_000, **_) -> tuple[bool, str]:
    params = _profile().with_overrides({"hole_gen": {"resonant": 0.0, "near_resonant": 0.0}})
    det = DetectorParams()
    powers = np.round(np.linspace(1.3, 13.0, 10), 6)
    taus = []
    for i, p in enumerate(powers):
        seq = protocol_fig1(probe_power=float(p), voltage=0.0)
        h = simulate_histogram(seq, params, det, reps, run_seed(200, i))
        taus.append(fit_exponential(h, seq.window("readout")).params["tau_ms"])
    rates = 1e3 / np.array(taus)
    slope, icpt = np.polyfit(powers, rates, 1)
    resid = rates - (slope * powers + icpt)
    r2 = 1 - np.sum(resid**2) / np.sum((rates - rates.mean()) ** 2)
    tau13 = taus[-1]
    ok = r2 >= 0.99 and 1.0 <= tau13 <= 2.5
    return ok, f"R^2={r2:.4f}, slope={slope:.1f} Hz/uW, tau(13 uW)={tau13:.3f} ms"


# -- A3 -----------------------------------------------------------------------


def a3_stabilization(reps: int = 20_000, **_) -> tuple[bool, str]:
    params, det = _profile(), DetectorParams()
    runs = [SweepRun(v, simulate_histogram(protocol_fig1(voltage=v), params, det, reps, run_seed(300, i)),
                     protocol_fig1(voltage=v), fit_decay=False) for i, v in enumerate((50.0, 0.0))]
    rows = sweep_summary(runs).rows
    r50, r0 = rows
    drop = (r50["init_hz"] - r50["final_hz"]) / r50["init_hz"]
    z0 = abs(r0["final_hz"]) / r0["final_err_hz"]
    ok = drop <= 0.10 and z0 <= 3.0
    return ok, (f"50 V drop={100 * drop:.2f}%; 0 V final-background={r0['final_hz']:.1f} Hz "
                f"({z0:.2f} sigma)")


# -- A4 / A5 ------------------------------------------------------------------


def _recovery(params, det, tau2, nr, voltage, reps, seed):
    seq = protocol_fig3(tau2=tau2, near_resonant_on=nr, voltage=voltage)
    h = simulate_histogram(seq, params, det, reps, seed)
    rp = recovery_point(h, seq)
    return rp.normalized_recovery, rp.normalized_recovery_err


def a4_recovery(reps_on: int = 1_000_000, reps_off: int = 200_000, **_) -> tuple[bool, str]:
    params, det = _profile(), DetectorParams()
    r_on, e_on = _recovery(params, det, 10.0, True, 50.0, reps_on, run_seed(400, 0))
    worst, where = 0.0, None
    k = 1
    for v in (0.0, 50.0, 100.0):
        for tau2 in (0.0, 1.0, 2.0, 5.0, 10.0):
            r, _ = _recovery(params, det, tau2, False, v, reps_off, run_seed(400, k))
            k += 1
            if abs(r) >= worst:
                worst, where = abs(r), (v, tau2)
    ok = r_on >= 0.9 and worst <= 0.1
    return ok, (f"on: R(10 ms, 50 V)={r_on:.3f}+/-{e_on:.3f}; off: max|R|={worst:.3f} "
                f"at V={where[0]:g} V, tau2={where[1]:g} ms")


def a5_voltage_window(reps: int = 1_000_000, **_) -> tuple[bool, str]:
    params, det = _profile(), DetectorParams()
    inside, outside = (20.0, 50.0, 80.0, 120.0), (0.0, 180.0)
    vals = {}
    for i, v in enumerate(inside + outside):
        vals[v] = _recovery(params, det, 10.0, True, v, reps, run_seed(500, i))
    ok = all(vals[v][0] >= 0.9 for v in inside) and all(vals[v][0] < 0.5 for v in outside)
    return ok, ", ".join(f"{v:g}V:{vals[v][0]:.3f}" for v in inside + outside)


# -- A6 -----------------------------------------------------------------------


def a6_power_broadening(reps: int = 5000, points: int = 41, **_) -> tuple[bool, str]:
    params, det = _profile(), DetectorParams()
    worst, parts = 0.0, []
    for j, s in enumerate((0.1, 1.0, 3.0)):
        power = s * params.p_sat
        w_model = params.gamma_0 * math.sqrt(1 + s)
        rows = []
        for i, d in enumerate(np.linspace(-3 * w_model, 3 * w_model, points)):
            seq = protocol_ple(detuning=float(d), resonant_power=power)
            h = simulate_histogram(seq, params, det, reps, run_seed(600 + j, i))
            rows.append((float(d), *window_intensity(h, *seq.window("scan"))))
        fit = fit_lorentzian(rows)
        dev = fit.params["fwhm_mhz"] / w_model - 1
        worst = max(worst, abs(dev))
        parts.append(f"s={s:g}: w={fit.params['fwhm_mhz']:.1f} MHz ({100 * dev:+.2f}%)")
    return worst <= 0.03, "; ".join(parts)


# -- A7 -----------------------------------------------------------------------


def _rel(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)) / np.abs(np.asarray(b))))


def a7_fit_correctness(draws: int = 100, resamples: int = 100, **_) -> tuple[bool, str]:
    rng = np.random.default_rng(700)
    worst_exp = worst_lor = 0.0
    t = np.arange(0.05, 38.0, 0.1)
    for _ in range(draws):
        a, tau, b = rng.uniform(1e3, 1e5), rng.uniform(0.3, 10.0), rng.uniform(100.0, 3000.0)
        y = a * np.exp(-t / tau) + b
        est = ExponentialDecay().fit(t, y, sample_weight=1 / y)
        worst_exp = max(worst_exp, _rel(est.coef_, [a, tau, b]))
        amp, x0, w, off = rng.uniform(1e3, 1e5), rng.uniform(-200, 200), rng.uniform(50, 1000), rng.uniform(0, 5e3)
        x = np.linspace(x0 - 4 * w, x0 + 4 * w, 41) + rng.uniform(-0.1, 0.1) * w
        yl = amp * (w / 2) ** 2 / ((x - x0) ** 2 + (w / 2) ** 2) + off
        lest = LorentzianLine().fit(x, yl)
        worst_lor = max(worst_lor, _rel(lest.coef_[[0, 2]], [amp, w]),
                        abs(lest.coef_[1] - x0) / w, abs(lest.coef_[3] - off) / max(off, amp))

    # Poisson coverage: A=30 kHz, tau=2.5 ms, B=0.7 kHz at 1e4 repetitions
    reps, width, period = 10_000, 100_000, 38_000_000
    starts = np.arange(0, period, width, dtype=float)
    tc = (starts + width / 2) * 1e-6
    mean = reps * width * 1e-9 * (30e3 * np.exp(-tc / 2.5) + 700.0)
    hits, max_dev = 0, 0.0
    for _ in range(resamples):
        h = Histogram(width, rng.poisson(mean), reps, period)
        fit = fit_exponential(h, (0, period))
        tau_hat, err = fit.params["tau_ms"], fit.errors["tau_ms"]
        max_dev = max(max_dev, abs(tau_hat / 2.5 - 1))
        hits += abs(tau_hat - 2.5) <= err
    ok = worst_exp <= 1e-6 and worst_lor <= 1e-6 and max_dev <= 0.02 and hits >= 0.6 * resamples
    return ok, (f"exp max rel err={worst_exp:.1e}, lorentz max rel err={worst_lor:.1e}; "
                f"Poisson: max|dtau|={100 * max_dev:.2f}%, 1-sigma coverage {hits}/{resamples}")


# -- A8 -----------------------------------------------------------------------


def a8_determinism(workers=(1, 4, 8), configs=None, **_) -> tuple[bool, str]:
    configs = list(configs) if configs is not None else shipped_configs()
    if not configs:
        return False, "no shipped configs found"
    bad = []
    with tempfile.TemporaryDirectory() as tmp:
        for cfg in configs:
            base = Path(tmp) / cfg.stem
            run_experiment(cfg, base / f"w{workers[0]}", workers=workers[0])
            for w in workers[1:]:
                rep = replay(base / f"w{workers[0]}" / "manifest.json", base / f"w{w}", workers=w)
                if not rep.identical:
                    bad.append(f"{cfg.stem}@{w}: {rep.divergences[:2]}")
    names = ", ".join(c.stem for c in configs)
    return not bad, (f"{len(configs)} configs ({names}) identical at workers {list(workers)}" if not bad
                     else "; ".join(bad))


# -- A9 -----------------------------------------------------------------------


def a9_dark_stability(seconds: float = 1e3, **_) -> tuple[bool, str]:
    params, det = _profile(), DetectorParams()
    duration = int(seconds * 1e9)
    changes, signal, parts = 0, 0, []
    rates = []
    for v in (0.0, 100.0):
        seq = PulseSequence((Segment(duration, (), v),), 1, f"dark {v:g} V")
        for k, init in enumerate(ChargeState):
            traj = simulate_trajectory(seq, params, init, seed=900 + k, mode="full")
            changes += len(traj.jump_times)
            signal += len(traj.emission_times)
            red = simulate_trajectory(seq, params, init, seed=950 + k, mode="reduced")
            changes += len(red.jump_times)
            tags = detect(red, det, seed=990 + k)
            rates.append(len(tags) / seconds)
    sigma = math.sqrt(det.dark_rate * seconds) / seconds
    z = max(abs(r - det.dark_rate) / sigma for r in rates)
    ok = changes == 0 and signal == 0 and z <= 3.0
    return ok, (f"{changes} state changes, {signal} emitter photons over {seconds:g} s; "
                f"dark rates {min(rates):.2f}..{max(rates):.2f} Hz (max |z|={z:.2f})")


CRITERIA: dict[str, tuple[str, Callable]] = {
    "A1": ("oracle equivalence", a1_oracle),
    "A2": ("decay rate linear in power", a2_linearity),
    "A3": ("bias-stabilized readout", a3_stabilization),
    "A4": ("near-resonant recovery", a4_recovery),
    "A5": ("recovery voltage window", a5_voltage_window),
    "A6": ("power broadening", a6_power_broadening),
    "A7": ("fit correctness", a7_fit_correctness),
    "A8": ("determinism", a8_determinism),
    "A9": ("dark stability", a9_dark_stability),
}

_QUICK = {
    "A1": {"n": 20_000},
    "A4": {"reps_on": 300_000, "reps_off": 50_000},
    "A5": {"reps": 300_000},
    "A6": {"reps": 2000, "points": 25},
    "A7": {"draws": 20, "resamples": 30},
    "A8": {"workers": (1, 2)},
    "A9": {"seconds": 100.0},
}


def run_criterion(key: str, **kwargs) -> CriterionResult:
    title, fn = CRITERIA[key]
    t0 = time.perf_counter()
    try:
        passed, detail = fn(**kwargs)
    except Exception as exc:  # a crash is a failed criterion, reported as such
        passed, detail = False, f"error: {type(exc).__name__}: {exc}"
    return CriterionResult(key, title, bool(passed), detail, time.perf_counter() - t0)


def run_suite(keys=None, quick: bool = False) -> list[CriterionResult]:
    """Evaluate the criteria in ``keys`` (default all) and return their results."""
    out = []
    for key in keys or CRITERIA:
        kw = dict(_QUICK.get(key, {})) if quick else {}
        out.append(run_criterion(key, **kw))
    return out
