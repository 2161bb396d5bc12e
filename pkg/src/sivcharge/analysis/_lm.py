"""Weighted Levenberg-Marquardt least squares with analytic Jacobians."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

_EPS = np.finfo(float).eps


@dataclass
class LMResult:
    params: np.ndarray
    cov: np.ndarray | None
    chi2: float
    n_iter: int
    converged: bool
    message: str


def levenberg_marquardt(model: Callable[[np.ndarray, np.ndarray], np.ndarray],
                        jacobian: Callable[[np.ndarray, np.ndarray], np.ndarray],
                        x: np.ndarray, y: np.ndarray, weights: np.ndarray, p0,
                        xtol: float = 1e-8, max_iter: int = 200,
                        lam0: float = 1e-3) -> LMResult:
    """Minimize ``sum(w * (y - model(x, p))**2)``.

    Converges once a step changes every parameter by less than ``xtol``
    relative to its magnitude.  Each damped normal-equation solve counts as
    one iteration.
    """
    p = np.asarray(p0, dtype=float).copy()
    sw = np.sqrt(weights)

    def chi2_of(params):
        r = (y - model(x, params)) * sw
        return float(r @ r), r

    chi2, r = chi2_of(p)
    lam = lam0
    message = "maximum iterations reached"
    converged = False
    it = 0
    while it < max_iter:
        jw = jacobian(x, p) * sw[:, None]
        a = jw.T @ jw
        g = jw.T @ r
        diag = np.diag(a).copy()
        diag[diag <= 0] = _EPS
        while it < max_iter:
            it += 1
            try:
                step = np.linalg.solve(a + lam * np.diag(diag), g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = p + step
            small = np.all(np.abs(step) <= xtol * (np.abs(p) + xtol))
            chi2_new, r_new = chi2_of(trial)
            if np.isfinite(chi2_new) and chi2_new <= chi2:
                p, chi2, r = trial, chi2_new, r_new
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
            if small or lam > 1e16:
                # no representable improvement left
                converged, message = True, "step below tolerance"
                break
        else:
            break
        if converged:
            break
        if small:
            converged, message = True, "relative parameter change below xtol"
            break

    cov = None
    if converged:
        jw = jacobian(x, p) * sw[:, None]
        try:
            cov = np.linalg.inv(jw.T @ jw)
        except np.linalg.LinAlgError:
            cov = np.linalg.pinv(jw.T @ jw)
    return LMResult(p, cov, chi2, it, converged, message)
