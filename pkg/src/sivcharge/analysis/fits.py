"""Histogram and scan fits returning named parameters."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..photonics import Histogram
from .estimators import ExponentialDecay, FitError, FitResult, LorentzianLine
from .validation import poisson_weights

__all__ = ["fit_exponential", "fit_lorentzian", "window_bins"]


def window_bins(h: Histogram, start: float, stop: float) -> np.ndarray:
    """Indices of the bins lying entirely inside ``[start, stop)``."""
    edges = h.edges
    return np.nonzero((edges[:-1] >= start) & (edges[1:] <= stop))[0]


def _rename(res: FitResult, names: Sequence[str], scale: Sequence[float], extra: dict) -> FitResult:
    params = {n: v * s for n, v, s in zip(names, res.params.values(), scale)}
    errors = None
    if res.errors is not None:
        errors = {n: v * s for n, v, s in zip(names, res.errors.values(), scale)}
    return FitResult(res.model, params, errors, res.chi2_red, res.converged, res.n_iter, extra)


def fit_exponential(h: Histogram, window: tuple[float, float], weights: str = "poisson",
                    xtol: float = 1e-8, max_iter: int = 200) -> FitResult:
    """Fit ``A exp(-t/tau) + B`` to the bin rates inside ``window`` (ns).

    ``t`` runs from the window start to each bin centre.  Parameters come
    back as ``A_hz``, ``tau_ms`` and ``B_hz``.

    Parameters
    ----------
    h : Histogram
    window : (start, stop)
        Only bins wholly inside the window are used.
    weights : {"poisson", "none"}
        Poisson weighting takes the variance of each bin as ``max(counts, 1)``.
    """
    start, stop = window
    idx = window_bins(h, start, stop)
    if idx.size < 5:
        raise ValueError(f"window [{start}, {stop}) holds {idx.size} complete bins; need at least 5")
    counts = h.counts[idx].astype(float)
    if counts.sum() == 0:
        raise FitError("no decay signal")
    starts = h.edges[:-1][idx].astype(float)
    lengths = h.bin_lengths[idx].astype(float)
    t_ms = (starts + 0.5 * lengths - start) * 1e-6
    exposure = max(h.total_repetitions, 1) * lengths * 1e-9
    y = counts / exposure
    if weights == "poisson":
        w = poisson_weights(counts) * exposure**2
    elif weights == "none":
        w = None
    else:
        raise ValueError(f"unknown weighting {weights!r}")
    est = ExponentialDecay(xtol=xtol, max_iter=max_iter).fit(t_ms, y, sample_weight=w)
    return _rename(est.result_, ("A_hz", "tau_ms", "B_hz"), (1.0, 1.0, 1.0),
                   {"window_ns": [float(start), float(stop)], "n_bins": int(idx.size)})


def fit_lorentzian(scan, xtol: float = 1e-8, max_iter: int = 200) -> FitResult:
    """Fit a Lorentzian line to ``(detuning_mhz, rate_hz[, rate_err_hz])`` rows.

    Rows with a positive error are weighted by its inverse square; without
    errors the fit is unweighted.  Parameters: ``A_hz``, ``x0_mhz``,
    ``fwhm_mhz``, ``B_hz``.
    """
    arr = np.asarray(scan, dtype=float)
    if arr.ndim != 2 or arr.shape[1] not in (2, 3):
        raise ValueError("scan must be rows of (detuning, rate) or (detuning, rate, error)")
    x, y = arr[:, 0], arr[:, 1]
    if len(x) < 7:
        raise ValueError(f"need at least 7 scan points, got {len(x)}")
    w = None
    if arr.shape[1] == 3:
        err = arr[:, 2]
        w = np.where(err > 0, 1.0 / np.where(err > 0, err, 1.0) ** 2, 0.0)
        if not np.any(w > 0):
            w = None
    est = LorentzianLine(xtol=xtol, max_iter=max_iter)
    width0 = est._initial(x, y, np.ones_like(y) if w is None else w, w is not None)[2]
    if np.ptp(x) < 2 * abs(width0):
        raise ValueError(f"scan spans {np.ptp(x):g} MHz, less than two estimated widths ({abs(width0):g} MHz)")
    est.fit(x, y, sample_weight=w)
    return _rename(est.result_, ("A_hz", "x0_mhz", "fwhm_mhz", "B_hz"), (1.0,) * 4, {"n_points": int(len(x))})
