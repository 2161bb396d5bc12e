"""Curve-fitting estimators with a scikit-learn compatible surface."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._lm import levenberg_marquardt
from .validation import check_x, check_xy

__all__ = ["FitError", "FitResult", "ExponentialDecay", "LorentzianLine"]


class FitError(ValueError):
    """The data cannot support the requested model."""


@dataclass
class FitResult:
    """Estimates, one-sigma errors (only when converged) and diagnostics."""

    model: str
    params: dict[str, float]
    errors: dict[str, float] | None
    chi2_red: float
    converged: bool
    n_iter: int
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "params": dict(self.params),
            "errors": None if self.errors is None else dict(self.errors),
            "chi2_red": self.chi2_red,
            "converged": self.converged,
            "n_iter": self.n_iter,
            **self.extra,
        }


class _CurveFit(BaseEstimator, RegressorMixin):
    _names: tuple[str, ...] = ()
    _min_points = 4

    def __init__(self, xtol=1e-8, max_iter=200):
        self.xtol = xtol
        self.max_iter = max_iter

    def _model(self, x, p):
        raise NotImplementedError

    def _jac(self, x, p):
        raise NotImplementedError

    def _initial(self, x, y, w, weighted=True):
        raise NotImplementedError

    def _finish(self, p):
        return p

    def fit(self, X, y, sample_weight=None):
        """Weighted least-squares fit; ``sample_weight`` are inverse variances."""
        x, y, w = check_xy(X, y, sample_weight, self._min_points)
        p0 = self._initial(x, y, w, sample_weight is not None)
        res = levenberg_marquardt(self._model, self._jac, x, y, w, p0, self.xtol, self.max_iter)
        p = self._finish(res.params)
        dof = max(len(x) - len(p), 1)
        errors = None
        if res.converged and res.cov is not None:
            errors = dict(zip(self._names, np.sqrt(np.clip(np.diag(res.cov), 0, None)).tolist()))
        self.coef_ = p
        self.result_ = FitResult(
            model=type(self).__name__,
            params=dict(zip(self._names, p.tolist())),
            errors=errors,
            chi2_red=res.chi2 / dof,
            converged=res.converged,
            n_iter=res.n_iter,
        )
        self.converged_ = res.converged
        self.n_iter_ = res.n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return self._model(check_x(X), self.coef_)


class ExponentialDecay(_CurveFit):
    """``y = A exp(-t / tau) + B`` with ``t`` measured from the window start.

    Starting values: ``B`` is the mean of the last 10% of points, ``A`` the
    first value minus ``B`` and ``tau`` the first time the data reach
    ``B + A/e``.

    Attributes
    ----------
    amplitude_, tau_, offset_ : float
    result_ : FitResult
    """

    _names = ("A", "tau", "B")
    _min_points = 5

    def _model(self, t, p):
        a, tau, b = p
        return a * np.exp(-t / tau) + b

    def _jac(self, t, p):
        a, tau, _ = p
        e = np.exp(-t / tau)
        return np.column_stack([e, a * e * t / tau**2, np.ones_like(t)])

    def _initial(self, t, y, w, weighted=True):
        if np.ptp(y) == 0:
            raise FitError("no decay signal")
        tail = max(1, int(math.ceil(0.1 * len(y))))
        b = float(np.mean(y[-tail:]))
        a = float(y[0] - b)
        if a == 0:
            a = float(np.max(y) - b) or float(np.ptp(y))
        level = b + a / math.e
        crossed = np.nonzero((y - level) * np.sign(a) <= 0)[0]
        span = float(t[-1] - t[0])
        tau = float(t[crossed[0]] - t[0]) if crossed.size and crossed[0] > 0 else span / 3
        return np.array([a, max(tau, span / (10 * len(t))), b])

    def _finish(self, p):
        self.amplitude_, self.tau_, self.offset_ = (float(v) for v in p)
        return p


class LorentzianLine(_CurveFit):
    """``y = A (w/2)^2 / ((x - x0)^2 + (w/2)^2) + B`` with FWHM ``w``.

    Attributes
    ----------
    amplitude_, center_, fwhm_, offset_ : float
    result_ : FitResult
    """

    _names = ("A", "x0", "w", "B")
    _min_points = 7

    def _model(self, x, p):
        a, x0, w, b = p
        h2 = 0.25 * w * w
        return a * h2 / ((x - x0) ** 2 + h2) + b

    def _jac(self, x, p):
        a, x0, w, b = p
        h2 = 0.25 * w * w
        d = (x - x0) ** 2 + h2
        lor = h2 / d
        return np.column_stack([
            lor,
            a * h2 * 2 * (x - x0) / d**2,
            a * 0.5 * w * (x - x0) ** 2 / d**2,
            np.ones_like(x),
        ])

    def _initial(self, x, y, w, weighted=True):
        order = np.argsort(x)
        x, y, w = x[order], y[order], w[order]
        b = float(np.min(y))
        i = int(np.argmax(y))
        a = float(y[i] - b)
        # a flat scan of n noisy points rarely spans five standard errors
        noise = float(np.median(1 / np.sqrt(w[w > 0]))) if weighted and np.any(w > 0) else 0.0
        if a <= 1e-12 * np.max(np.abs(y)) or a < 5 * noise:
            raise FitError("no line detected")
        half = b + a / 2
        left = right = None
        for j in range(i, 0, -1):
            if y[j - 1] <= half:
                left = x[j - 1] + (half - y[j - 1]) * (x[j] - x[j - 1]) / (y[j] - y[j - 1])
                break
        for j in range(i, len(x) - 1):
            if y[j + 1] <= half:
                right = x[j] + (y[j] - half) * (x[j + 1] - x[j]) / (y[j] - y[j + 1])
                break
        if left is not None and right is not None:
            width = right - left
        elif left is not None:
            width = 2 * (x[i] - left)
        elif right is not None:
            width = 2 * (right - x[i])
        else:
            width = np.ptp(x) / 4
        return np.array([a, float(x[i]), float(width), b])

    def _finish(self, p):
        p = p.copy()
        p[2] = abs(p[2])
        self.amplitude_, self.center_, self.fwhm_, self.offset_ = (float(v) for v in p)
        return p
