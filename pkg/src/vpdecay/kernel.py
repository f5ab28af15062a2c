"""Per-mode Volterra resolvent G(t, xi), physical Green kernel and dyadic blocks.

For every frequency the density obeys rho = S + K *_t rho, whose resolvent
solves G = K + K *_t G.  The time convolution is discretised with the
trapezoid rule on a uniform grid (second order), vectorised across modes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .dispersion import _transform_many, default_t_cut, tail_bound
from .equilibria import Equilibrium
from .errors import DomainError, PrecisionError, RangeError
from .grids import CartesianGrid, RadialGrid

DEFAULT_DT = 0.05
DEFAULT_T = 60.0
BLOWUP = 1e6


class ResolutionWarning(UserWarning):
    pass


@dataclass
class ModeKernelTable:
    """K(t_n, xi_m) with times on axis 0 and modes on axis 1."""

    eq: Equilibrium
    t_grid: np.ndarray
    xi_grid: np.ndarray
    K: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0])

    @property
    def radii(self) -> np.ndarray:
        return np.sqrt(np.sum(self.xi_grid**2, axis=-1))


@dataclass
class ResolventTable:
    table: ModeKernelTable
    G: np.ndarray
    unstable: np.ndarray

    @property
    def t_grid(self):
        return self.table.t_grid

    @property
    def radii(self):
        return self.table.radii

    @property
    def dt(self):
        return self.table.dt

    @property
    def eq(self):
        return self.table.eq


def _ray_grid(xi_grid, d):
    xi_grid = np.asarray(xi_grid, dtype=float)
    if xi_grid.ndim == 1:
        out = np.zeros((xi_grid.size, d))
        out[:, 0] = xi_grid
        return out
    return xi_grid


def build_mode_kernel_table(eq: Equilibrium, t_grid, xi_grid) -> ModeKernelTable:
    """Tabulate K on times x modes.

    ``xi_grid`` is either an (M, d) array of frequency vectors or a 1-D array
    of radii, taken along e_1.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    xi = _ray_grid(xi_grid, eq.dimension)
    if t_grid.size < 2 or xi.shape[0] == 0:
        raise DomainError("time and frequency grids must be nonempty", "kernel")
    if np.any(np.diff(t_grid) <= 0):
        raise DomainError("time grid must be increasing", "kernel")
    r2 = np.sum(xi * xi, axis=-1)
    eta = t_grid[:, None, None] * xi[None, :, :]
    K = -(r2 / (1.0 + r2))[None, :] * t_grid[:, None] * eq.mu_hat(eta)
    return ModeKernelTable(eq, t_grid, xi, K)


def uniform_time_grid(dt: float = DEFAULT_DT, T: float = DEFAULT_T) -> np.ndarray:
    n = int(round(T / dt))
    return dt * np.arange(n + 1)


def _volterra(K, h, blowup=BLOWUP):
    """Trapezoid solve of G = K + K * G per column; returns (G, unstable mask)."""
    n_t = K.shape[0]
    G = np.zeros_like(K)
    G[0] = K[0]
    scale = np.max(np.abs(K), axis=0)
    limit = blowup * np.where(scale > 0, scale, 1.0)
    denom = 1.0 - 0.5 * h * K[0]
    unstable = np.zeros(K.shape[1], dtype=bool)
    for n in range(1, n_t):
        acc = 0.5 * K[n] * G[0]
        if n > 1:
            acc = acc + np.einsum("jm,jm->m", K[n - 1:0:-1], G[1:n])
        G[n] = (K[n] + h * acc) / denom
        bad = np.abs(G[n]) > limit
        if np.any(bad):
            unstable |= bad
            G[:, bad] = 0.0
            K[:, bad] = 0.0
    return G, unstable


def solve_mode_resolvent(table: ModeKernelTable, blowup: float = BLOWUP) -> ResolventTable:
    """Second-order product-trapezoid resolvent, all modes at once.

    Modes whose |G| exceeds ``blowup`` * max|K| are flagged unstable and
    their rows are set to NaN.
    """
    t = table.t_grid
    h = table.dt
    if not np.allclose(np.diff(t), h, rtol=1e-9, atol=1e-12):
        raise DomainError("resolvent needs a uniform time grid", "kernel")
    G, unstable = _volterra(np.array(table.K), h, blowup)
    if np.any(unstable):
        G[:, unstable] = np.nan
        warnings.warn(f"{int(unstable.sum())} modes diverged (Penrose failure)", RuntimeWarning)
    return ResolventTable(table, G, unstable)


def resolvent_residual(res: ResolventTable) -> float:
    """Max relative residual of the discrete equation G - K - K *_h G."""
    K, G, h = res.table.K, res.G, res.dt
    ok = ~res.unstable
    K, G = K[:, ok], G[:, ok]
    worst = 0.0
    for n in range(1, K.shape[0]):
        conv = 0.5 * K[n] * G[0] + 0.5 * K[0] * G[n]
        if n > 1:
            conv = conv + np.einsum("jm,jm->m", K[n - 1:0:-1], G[1:n])
        r = G[n] - K[n] - h * conv
        worst = max(worst, float(np.max(np.abs(r))))
    scale = float(np.max(np.abs(G))) or 1.0
    return worst / scale


def resolvent_transform(res: ResolventTable, taus, mode: int):
    """Trapezoid of exp(-i tau t) G(t) over the table's horizon."""
    t, h = res.t_grid, res.dt
    w = np.full(t.size, h)
    w[[0, -1]] *= 0.5
    g = res.G[:, mode] * w
    return np.exp(-1j * np.multiply.outer(np.asarray(taus, dtype=complex), t)) @ g


def laplace_consistency(res: ResolventTable, taus, modes=None) -> float:
    """Max relative error between the transformed resolvent and K~/(1 - K~).

    Compared over the product of ``taus`` and table columns ``modes``.
    Modes with xi = 0 count as exact.
    """
    taus = np.asarray(taus, dtype=complex)
    if np.any(taus.imag > 0):
        raise DomainError("Im tau must be <= 0", "kernel")
    modes = range(res.G.shape[1]) if modes is None else modes
    eq = res.eq
    T = float(res.t_grid[-1])
    worst = 0.0
    for m in modes:
        xi = res.table.xi_grid[m]
        r = float(np.linalg.norm(xi))
        if r == 0.0:
            continue
        if res.unstable[m]:
            raise PrecisionError(f"mode {m} is unstable", "kernel")
        Kt, ktail = _transform_many(eq, xi, taus, default_t_cut(eq, r))
        exact = Kt / (1.0 - Kt)
        margin = float(np.min(np.abs(1.0 - Kt)))
        gtail = float(np.max(np.abs(res.G[res.t_grid >= 0.9 * T, m]))) * T
        if margin < 10.0 * (ktail + gtail):
            raise PrecisionError(f"margin {margin:.3e} below 10x tail at |xi|={r}", "kernel")
        num = resolvent_transform(res, taus, m)
        denom = np.maximum(np.abs(exact), 1e-300)
        worst = max(worst, float(np.max(np.abs(num - exact) / denom)))
    return worst


def resolvent_for_radii(eq: Equilibrium, radii, dt=DEFAULT_DT, T=DEFAULT_T) -> ResolventTable:
    return solve_mode_resolvent(build_mode_kernel_table(eq, uniform_time_grid(dt, T), radii))


# --- physical-space assembly -------------------------------------------------


def _radial_profile(res: ResolventTable, row: int):
    r = res.radii
    order = np.argsort(r)
    r, g = r[order], res.G[row, order]
    spline = CubicSpline(r, g)
    r_max = float(r[-1])

    def profile(k):
        k = np.asarray(k, dtype=float)
        out = np.zeros(k.shape)
        inside = k <= r_max
        out[inside] = spline(k[inside])
        return out

    return profile, r_max


def green_box(t: float, side0: float = 40.0, growth: float = 14.0) -> float:
    """Box side that holds the kernel's ballistic spread |x| <~ 7 t."""
    return max(side0, growth * t)


@dataclass
class GreenNorms:
    """L^1 / L^inf norms of grad^k G(t) on sampled times.

    ``norms[i, k] = (L1, Linf)`` at ``t[i]``.
    """

    t: np.ndarray
    norms: np.ndarray
    method: str
    warnings: list = field(default_factory=list)

    def series(self, k: int, which: str):
        return self.norms[:, k, 0 if which == "L1" else 1]


def assemble_physical_green(res: ResolventTable, x_grid=None, k_max: int = 2, t_samples=None, *,
                            method: str = "cartesian", adaptive_box: bool = True) -> GreenNorms:
    """Inverse transform of the mode resolvent and its derivative norms.

    ``method="cartesian"`` interpolates the radial mode data onto an FFT
    lattice (``x_grid``, default 64^3 on side 40).  With ``adaptive_box`` the
    side grows with t so the ballistic spread of G stays inside the box.
    ``method="radial"`` uses the exact 3-D radial sine transform instead.
    """
    eq = res.eq
    if not eq.is_isotropic:
        raise DomainError("physical assembly needs an isotropic equilibrium", "kernel")
    if x_grid is None:
        x_grid = CartesianGrid(64, 40.0, eq.dimension)
    t_grid = res.t_grid
    if t_samples is None:
        t_samples = t_grid
    rows = [int(round(float(ts) / res.dt)) for ts in t_samples]
    if max(rows) >= t_grid.size:
        raise DomainError("sample time beyond the resolvent horizon", "kernel")
    out = np.zeros((len(rows), k_max + 1, 2))
    notes = []
    for i, row in enumerate(rows):
        profile, r_max = _radial_profile(res, row)
        t = float(t_grid[row])
        if method == "radial":
            grid = x_grid if isinstance(x_grid, RadialGrid) else \
                RadialGrid.covering(max(40.0, 10.0 * eq.sigma * t + 20.0), r_max)
            F = profile(grid.k)
        else:
            side = green_box(t, x_grid.side) if adaptive_box else x_grid.side
            grid = CartesianGrid(x_grid.n, side, eq.dimension)
            F = profile(grid.xi_norm)
            if float(np.max(grid.xi_norm)) > r_max:
                notes.append(f"t={t:g}: lattice frequencies exceed the table's |xi| range")
            face = np.max(np.abs(F[grid.n // 2]))
            peak = float(np.max(np.abs(F)))
            if peak > 0 and face > 1e-6 * peak:
                notes.append(f"t={t:g}: boundary spectral amplitude {face / peak:.1e} of peak")
        out[i] = np.array(grid.derivative_norms(F, k_max))
    for msg in notes:
        warnings.warn(msg, ResolutionWarning)
    return GreenNorms(np.asarray(t_grid[rows], dtype=float), out, method, notes)


# --- Littlewood-Paley blocks -------------------------------------------------


def _smooth_step(x):
    """C^inf step: 0 for x <= 0, 1 for x >= 1."""
    x = np.asarray(x, dtype=float)
    a = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
    b = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1.0 - x, 1.0)), 0.0)
    return a / (a + b)


def lp_bump(s):
    """Smooth profile equal to 1 on [1/2, 2] and supported in [1/4, 4]."""
    s = np.asarray(s, dtype=float)
    out = np.zeros(s.shape)
    pos = s > 0
    u = np.abs(np.log2(s[pos]))
    out[pos] = _smooth_step(2.0 - u)
    return out


def lp_chi(q: int, xi_norm):
    """Normalised dyadic piece chi_q; the family sums to 1 for xi != 0."""
    s = np.asarray(xi_norm, dtype=float)
    out = np.zeros(s.shape)
    pos = s > 0
    sp = s[pos]
    base = np.floor(np.log2(sp)).astype(int)
    total = np.zeros(sp.shape)
    for off in range(-2, 4):
        p = base + off
        total += lp_bump(sp / 2.0**p)
    out[pos] = lp_bump(sp / 2.0**q) / total
    return out


@dataclass
class LPBlockBound:
    q: int
    A: float
    delta: float
    K_pow: float
    t: np.ndarray
    L1: np.ndarray
    Linf: np.ndarray
    envelope_L1: np.ndarray
    envelope_Linf: np.ndarray
    regime: str

    @property
    def ratio_L1(self):
        return self.L1 / self.envelope_L1

    @property
    def ratio_Linf(self):
        return self.Linf / self.envelope_Linf

    @property
    def constant(self) -> float:
        """Worst ratio over sampled times and both norms."""
        return float(max(np.max(self.ratio_L1), np.max(self.ratio_Linf)))


def lp_envelopes(q, t, d, delta=1.0, K_pow=None, A=1.0):
    """Envelope shapes (L1, Linf) for block q; high regime when 2^q >= A."""
    K_pow = d + 3 if K_pow is None else K_pow
    t = np.asarray(t, dtype=float)
    p = 2.0**q
    decay = (1.0 + p * t) ** (-K_pow)
    if p >= A:
        return (p ** (1 + delta) / (1 + p * p) * decay,
                p ** (d + 1 + delta) / (1 + p * p) * decay, "high")
    return p * decay, p ** (d + 1) * decay, "low"


def littlewood_paley_block(res: ResolventTable, q: int, t_samples, *, delta: float = 1.0,
                           K_pow=None, A: float = 1.0, grid=None) -> LPBlockBound:
    """Norms of G_q(t) = F^{-1}[chi_q G(t, .)] against the dyadic envelopes.

    Uses the exact radial transform (isotropic equilibria, d = 3).
    """
    eq = res.eq
    d = eq.dimension
    r_tab = float(np.max(res.radii))
    lo, hi = 2.0 ** (q - 2), 2.0 ** (q + 2)
    if lo >= r_tab or hi > r_tab * (1 + 1e-12):
        raise RangeError(f"block q={q} support [{lo}, {hi}] exceeds resolved |xi| <= {r_tab}",
                         "kernel")
    radii = np.sort(res.radii)
    spacing = float(np.max(np.diff(radii[(radii >= lo) & (radii <= hi)], prepend=lo))) \
        if np.any((radii >= lo) & (radii <= hi)) else np.inf
    if spacing > lo:
        raise RangeError(f"block q={q} is not resolved by the |xi| table", "kernel")
    t_samples = np.asarray(t_samples, dtype=float)
    L1, Linf = [], []
    for ts in t_samples:
        row = int(round(ts / res.dt))
        if row >= res.t_grid.size:
            raise DomainError("sample time beyond the resolvent horizon", "kernel")
        profile, _ = _radial_profile(res, row)
        g = grid
        if g is None:
            radius = 10.0 * eq.sigma * ts + 40.0 / lo
            g = RadialGrid.covering(radius, 4.0 * hi)
        if g.nyquist < lo:
            raise RangeError(f"block q={q} lies above the grid Nyquist", "kernel")
        F = lp_chi(q, g.k) * profile(g.k)
        (a, b), = g.derivative_norms(F, 0)
        L1.append(a)
        Linf.append(b)
    env1, envi, regime = lp_envelopes(q, t_samples, d, delta, K_pow, A)
    return LPBlockBound(q, A, delta, d + 3 if K_pow is None else K_pow, t_samples,
                        np.array(L1), np.array(Linf), env1, envi, regime)


def lp_spread(blocks) -> dict:
    """Per regime: (max C_q, min C_q, spread) over blocks' worst ratios."""
    out = {}
    for regime in ("low", "high"):
        cs = [b.constant for b in blocks if b.regime == regime]
        if cs:
            out[regime] = (max(cs), min(cs), max(cs) / min(cs) if min(cs) > 0 else math.inf)
    return out


def default_lp_table(eq: Equilibrium, q_max: int, dt: float = 0.01, T: float = 21.0,
                     dr: float = 0.01) -> ResolventTable:
    """Resolvent table fine enough in t and |xi| for blocks up to ``q_max``."""
    radii = np.arange(0.0, 2.0 ** (q_max + 2) + dr / 2, dr)
    return resolvent_for_radii(eq, radii, dt, T)


__all__ = [
    "ModeKernelTable", "ResolventTable", "GreenNorms", "LPBlockBound", "ResolutionWarning",
    "build_mode_kernel_table", "solve_mode_resolvent", "resolvent_residual",
    "resolvent_transform", "laplace_consistency", "resolvent_for_radii", "uniform_time_grid",
    "assemble_physical_green", "green_box", "lp_bump", "lp_chi", "lp_envelopes",
    "littlewood_paley_block", "lp_spread", "default_lp_table", "tail_bound",
]
