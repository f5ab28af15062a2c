"""Power-law fits of decay series and the report container shared by modules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class DecayFit:
    t_min: float
    t_max: float
    exponent: float
    amplitude: float
    log_correction: bool
    residual: float
    n_points: int


def default_window(T: float) -> tuple[float, float]:
    return max(2.0, T / 10.0), 0.9 * T


def fit_decay(t, values, window=None, log_correction: bool = False) -> DecayFit:
    """Least-squares slope of log(value) (optionally over log(2 + t)) against log t.

    ``residual`` is the RMS of the log-space misfit.
    """
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    if window is None:
        window = default_window(float(t.max()))
    lo, hi = window
    sel = (t >= lo) & (t <= hi)
    ts, vs = t[sel], values[sel]
    if ts.size < 5:
        raise DomainError(f"need >= 5 points in window [{lo}, {hi}], got {ts.size}", "cli")
    if np.any(~np.isfinite(vs)) or np.any(vs <= 0):
        raise DomainError("fit needs positive finite values in the window", "cli")
    y = np.log(vs)
    if log_correction:
        y = y - np.log(np.log(2.0 + ts))
    A = np.column_stack([np.log(ts), np.ones_like(ts)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return DecayFit(float(lo), float(hi), float(coef[0]), float(math.exp(coef[1])),
                    bool(log_correction), float(np.sqrt(np.mean(resid**2))), int(ts.size))


@dataclass
class DecayReport:
    """Norm time series keyed by name, with fitted exponents.

    ``series[name]`` is an array aligned with ``t``; ``fits[name]`` is the
    DecayFit (or None when the window holds too few usable points).
    """

    t: np.ndarray
    series: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def add(self, name, values, window=None, log_correction=False):
        values = np.asarray(values, dtype=float)
        self.series[name] = values
        try:
            self.fits[name] = fit_decay(self.t, values, window, log_correction)
        except DomainError:
            self.fits[name] = None

    def exponent(self, name):
        fit = self.fits.get(name)
        return None if fit is None else fit.exponent

    def rows(self):
        names = list(self.series)
        for i, t in enumerate(self.t):
            yield (float(t),) + tuple(float(self.series[n][i]) for n in names)
