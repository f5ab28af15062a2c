"""Forcing assembly, linear response and the nonlinear bootstrap loop.

Histories live on a grid from :mod:`vpdecay.grids`.  The linear pieces
(spectral multipliers, the per-mode Duhamel convolution) work on either
layout.  The nonlinear pieces use a radial reduction in d = 3: for an
isotropic equilibrium and a rotation-invariant datum, rho is radial and
E = q(t, |x|) x.  At an output point x = r e_1 every remaining integral is
invariant under rotations about e_1, so it reduces to a 2-D integral over
(a_1, |a_perp|) with weight 2 pi |a_perp|, and all trajectories stay in the
(e_1, e_2) plane.

Sign conventions: E = -grad (1 - Delta)^{-1} rho, the forcing is
S = I + R_L - R_NL, and rho solves rho = S + K * rho, so rho = S + G * S.
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import CubicSpline

from .characteristics import FieldHistory, flow_at_start, flow_at_times
from .equilibria import Equilibrium
from .errors import (CapabilityError, ConfigurationError, InstabilityError, ParameterError)
from .grids import CartesianGrid, RadialGrid
from .kernel import ModeKernelTable, ResolventTable, resolvent_for_radii
from .transport import InitialDatum, gaussian_free_oracle

DT_NONLINEAR = 0.25
LEDGER_LIMIT = 1e6


def _grid_shape(grid):
    return (grid.n,) if isinstance(grid, RadialGrid) else grid.shape


def weighted_norms(t_grid, norms, d: int, log_weight: bool = False):
    """Pointwise max_k <t>^k L1_k + <t>^{d+k} Linf_k (optionally over log(2 + t))."""
    t = np.asarray(t_grid, dtype=float)
    jt = np.sqrt(1.0 + t * t)[:, None]
    k = np.arange(norms.shape[1])[None, :]
    per = np.max(jt**k * norms[..., 0] + jt ** (d + k) * norms[..., 1], axis=1)
    if log_weight:
        per = per / np.log(2.0 + t)
    return per


def running_ledger(t_grid, norms, d: int, log_weight: bool = False):
    """sup over s <= t of :func:`weighted_norms`; nondecreasing by construction."""
    return np.maximum.accumulate(weighted_norms(t_grid, norms, d, log_weight))


class DensityHistory:
    """rho(t, x) on a fixed grid, with a lazily filled spectral cache."""

    def __init__(self, t_grid, grid, values=None, spectral=None):
        if (values is None) == (spectral is None):
            raise ParameterError("give exactly one of values / spectral", "response")
        self.t_grid = np.asarray(t_grid, dtype=float)
        self.grid = grid
        self._values = None if values is None else np.asarray(values, dtype=float)
        self._spectral = None if spectral is None else np.asarray(spectral)
        data = self._values if self._values is not None else self._spectral
        expected = (self.t_grid.size,) + _grid_shape(grid)
        if data.shape != expected:
            raise ConfigurationError(f"history shape {data.shape} != {expected}", "response")
        self._norms = {}

    @classmethod
    def zeros(cls, t_grid, grid):
        return cls(t_grid, grid, values=np.zeros((len(t_grid),) + _grid_shape(grid)))

    @property
    def dimension(self) -> int:
        return self.grid.dimension

    @property
    def values(self):
        if self._values is None:
            self._values = np.asarray(self.grid.to_physical(self._spectral), dtype=float)
        return self._values

    @property
    def spectral(self):
        if self._spectral is None:
            self._spectral = self.grid.to_spectral(self._values)
        return self._spectral

    def roundtrip_error(self) -> float:
        """Relative sup error of physical -> spectral -> physical."""
        back = np.asarray(self.grid.to_physical(self.spectral), dtype=float)
        scale = max(float(np.max(np.abs(self.values))), 1e-300)
        return float(np.max(np.abs(back - self.values))) / scale

    def derivative_norms(self, k_max: int = 2):
        """Array (n_t, k_max + 1, 2) of (L1, Linf) of |grad^k rho(t)|."""
        if k_max not in self._norms:
            F = self.spectral
            self._norms[k_max] = np.array([self.grid.derivative_norms(F[n], k_max)
                                           for n in range(self.t_grid.size)])
        return self._norms[k_max]

    def ledger(self, N: int = 2, log_weight: bool = False):
        return running_ledger(self.t_grid, self.derivative_norms(N), self.dimension, log_weight)

    def sup(self):
        return np.max(np.abs(self.values), axis=tuple(range(1, self.values.ndim)))

    def _combine(self, other, sign):
        if other.grid != self.grid or not np.array_equal(other.t_grid, self.t_grid):
            raise ConfigurationError("histories live on different grids", "response")
        return DensityHistory(self.t_grid, self.grid, values=self.values + sign * other.values)

    def __add__(self, other):
        return self._combine(other, 1.0)

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def scaled(self, factor: float):
        return DensityHistory(self.t_grid, self.grid, values=factor * self.values)

    def restrict(self, t_grid):
        """Sub-history at times contained in this history's grid."""
        idx = [int(np.argmin(np.abs(self.t_grid - t))) for t in t_grid]
        if not np.allclose(self.t_grid[idx], t_grid, atol=1e-9):
            raise ConfigurationError("requested times are not on the history grid", "response")
        return DensityHistory(self.t_grid[idx], self.grid, spectral=self.spectral[idx])

    def refine(self, t_grid):
        """Cubic-in-time interpolation of the spectral data onto ``t_grid``."""
        t_grid = np.asarray(t_grid, dtype=float)
        if t_grid[0] < self.t_grid[0] - 1e-12 or t_grid[-1] > self.t_grid[-1] + 1e-12:
            raise ConfigurationError("refinement outside the history window", "response")
        F = self.spectral
        if np.iscomplexobj(F):
            vals = (CubicSpline(self.t_grid, F.real, axis=0)(t_grid)
                    + 1j * CubicSpline(self.t_grid, F.imag, axis=0)(t_grid))
        else:
            vals = CubicSpline(self.t_grid, F, axis=0)(t_grid)
        return DensityHistory(t_grid, self.grid, spectral=vals)


# --- linear response ---------------------------------------------------------


def grid_radii(grid):
    """Distinct |xi| values of a grid's spectral side, sorted."""
    xi = np.asarray(grid.xi_norm, dtype=float).ravel()
    return np.unique(np.round(xi, 12))


def resolvent_for_grid(eq: Equilibrium, grid, dt: float = 0.05, T: float = 20.0):
    """Resolvent table whose modes are exactly the grid's |xi| values."""
    return resolvent_for_radii(eq, grid_radii(grid), dt, T)


def _mode_columns(grid, radii):
    xi = np.asarray(grid.xi_norm, dtype=float)
    xi = np.broadcast_to(xi, _grid_shape(grid)) if xi.shape != _grid_shape(grid) else xi
    order = np.argsort(radii)
    rs = radii[order]
    pos = np.clip(np.searchsorted(rs, xi), 0, rs.size - 1)
    lower = np.clip(pos - 1, 0, rs.size - 1)
    pick = np.where(np.abs(rs[lower] - xi) < np.abs(rs[pos] - xi), lower, pos)
    gap = np.abs(rs[pick] - xi)
    if np.any(gap > 1e-9 * np.maximum(1.0, xi)):
        raise ConfigurationError(f"grid frequency not in the resolvent table (gap {gap.max():.2e})",
                                 "response")
    return order[pick]


def _check_times(history_t, table_t):
    n = history_t.size
    if n > table_t.size or not np.allclose(history_t, table_t[:n], rtol=0, atol=1e-9):
        raise ConfigurationError("history and resolvent time grids differ", "response")
    return n


def _trapezoid_convolution(A, B, h):
    """h [A_n B_0 / 2 + sum_{0<j<n} A_{n-j} B_j + A_0 B_n / 2] for every n, per column."""
    n_t = A.shape[0]
    out = np.zeros_like(B, dtype=np.result_type(A, B))
    for n in range(1, n_t):
        acc = 0.5 * (A[n] * B[0] + A[0] * B[n])
        if n > 1:
            acc = acc + np.einsum("jm,jm->m", A[n - 1:0:-1], B[1:n])
        out[n] = h * acc
    return out


def linear_response(S: DensityHistory, res: ResolventTable) -> DensityHistory:
    """rho = S + G * S, mode by mode, with the trapezoid rule in time."""
    n_t = _check_times(S.t_grid, res.t_grid)
    cols = _mode_columns(S.grid, res.radii)
    G = res.G[:n_t][:, cols.ravel()]
    if np.any(~np.isfinite(G)):
        raise InstabilityError("resolvent has unstable modes on this grid", "response")
    Sh = S.spectral.reshape(n_t, -1)
    rho = Sh + _trapezoid_convolution(G, Sh, res.dt)
    return DensityHistory(S.t_grid, S.grid, spectral=rho.reshape(S.spectral.shape))


def duhamel_residual(rho: DensityHistory, S: DensityHistory, table: ModeKernelTable) -> float:
    """sup |rho - S - K * rho| over the history, in physical space."""
    n_t = _check_times(rho.t_grid, table.t_grid)
    cols = _mode_columns(rho.grid, table.radii)
    K = table.K[:n_t][:, cols.ravel()]
    rh = rho.spectral.reshape(n_t, -1)
    conv = _trapezoid_convolution(K, rh, table.dt).reshape(rho.spectral.shape)
    resid = rho.spectral - S.spectral - conv
    return float(np.max(np.abs(rho.grid.to_physical(resid))))


def field_from_density(rho: DensityHistory) -> FieldHistory:
    """E = -grad (1 - Delta)^{-1} rho, i.e. E^ = -i xi rho^ / (1 + |xi|^2)."""
    grid = rho.grid
    if isinstance(grid, RadialGrid):
        P = rho.spectral / (1.0 + grid.k**2)
        _, f1, _, _, f2_0 = grid.profile_derivatives(P)
        q = np.concatenate([-np.atleast_1d(f2_0)[:, None], -f1 / grid.r], axis=1)
        r_all = np.concatenate([[0.0], grid.r])
        ledger = {"Linf": np.max(np.abs(q) * r_all, axis=1), "multiplier": 0.5}
        return FieldHistory.from_radial(rho.t_grid, grid, q, ledger)
    F = rho.spectral / (1.0 + grid.xi_norm**2)
    comps = [grid.to_physical(-1j * k * F) for k in grid.xi_axes]
    samples = np.stack(comps, axis=-1)
    ledger = {"Linf": np.max(np.sqrt(np.sum(samples**2, -1)).reshape(len(rho.t_grid), -1), 1),
              "multiplier": 0.5}
    return FieldHistory(rho.t_grid, grid, samples, "cartesian", ledger)


# --- nonlinear forcing (radial reduction) ------------------------------------


@dataclass(frozen=True)
class ForcingQuadrature:
    """Node counts for the reduced 2-D integrals.

    ``n_axial`` x ``n_perp`` Gauss-Legendre nodes serve the reaction term,
    the ``*_i`` counts the initial term.  ``per_panel`` nodes per s-panel.
    """

    n_out: int = 24
    n_axial: int = 20
    n_perp: int = 10
    n_axial_v: int = 20
    n_perp_v: int = 10
    n_axial_i: int = 24
    n_perp_i: int = 12
    per_panel: int = 4
    width: float = 7.0
    tol: float = 1e-12


def _composite(edges, counts):
    xs, ws = [], []
    for a, b, n in zip(edges[:-1], edges[1:], counts):
        x, w = leggauss(n)
        xs.append(0.5 * (a + b) + 0.5 * (b - a) * x)
        ws.append(0.5 * (b - a) * w)
    return np.concatenate(xs), np.concatenate(ws)


def _plane_nodes(half: float, n1: int, n2: int, core: float | None = None):
    """Points (a_1, a_perp, 0) and weights for int over R^3 of an e_1-axisymmetric integrand.

    With ``core`` < ``half`` half of the nodes go to |a| <= core.
    """
    if core is None or core >= half:
        a1, w1 = _composite([-half, half], [n1])
        ap, w2 = _composite([0.0, half], [n2])
    else:
        q1 = max(n1 // 4, 2)
        a1, w1 = _composite([-half, -core, core, half], [q1, n1 - 2 * q1, q1])
        q2 = max(n2 // 2, 2)
        ap, w2 = _composite([0.0, core, half], [n2 - q2, q2])
    A1, AP = np.meshgrid(a1, ap, indexing="ij")
    W = np.outer(w1, w2) * 2.0 * math.pi * AP
    pts = np.stack([A1.ravel(), AP.ravel(), np.zeros(A1.size)], axis=-1)
    return pts, W.ravel()


def _check_radial_setting(f0: InitialDatum, eq: Equilibrium):
    if eq.dimension != 3 or f0.dimension != 3:
        raise CapabilityError("nonlinear forcing is implemented for d = 3 (radial reduction)",
                              "response")
    if not eq.is_isotropic:
        raise CapabilityError("nonlinear forcing needs an isotropic equilibrium", "response")
    if not f0.separable or f0.x_profile.kind != "gaussian" or f0.v_profile.kind != "gaussian":
        raise CapabilityError("nonlinear forcing needs a Gaussian datum", "response")


def _spread(f0: InitialDatum, t):
    return math.hypot(f0.x_profile.scale, t * f0.v_profile.scale)


def output_radii(f0: InitialDatum, eq: Equilibrium, t: float, quad: ForcingQuadrature):
    """Radial sample points of the forcing at time t."""
    R = quad.width * (_spread(f0, t) + eq.sigma * t) + 4.0
    return np.linspace(0.0, R, quad.n_out)


def _on_axis(radii):
    radii = np.asarray(radii, dtype=float)
    return np.stack([radii, np.zeros_like(radii), np.zeros_like(radii)], axis=-1)


def _initial_correction(f0, E, t, radii, quad):
    """I - rho_free at x = r e_1, as one difference on shared nodes."""
    x = _on_axis(radii)
    if f0.is_zero or getattr(E, "is_zero", False) or t == 0.0:
        return np.zeros(radii.shape)
    if t >= 1.0:
        # w-form: v = (x - w) / t, dv = dw / t^3
        nodes, wts = _plane_nodes(f0.x_profile.half_width, quad.n_axial_i, quad.n_perp_i)
        w = np.broadcast_to(nodes[None], (x.shape[0],) + nodes.shape)
        v = (x[:, None, :] - w) / t
        wts = wts / t**3
    else:
        nodes, wts = _plane_nodes(f0.v_profile.half_width, quad.n_axial_i, quad.n_perp_i)
        v = np.broadcast_to(nodes[None], (x.shape[0],) + nodes.shape)
        w = x[:, None, :] - t * v
    Y, W = flow_at_start(E, t, 0.0, np.ascontiguousarray(w), np.ascontiguousarray(v), quad.tol)
    diff = f0(w + Y, v + W) - f0(w, v)
    return diff @ wts


def initial_term(f0: InitialDatum, E, t: float, radii, quad: ForcingQuadrature | None = None):
    """I(t, r e_1) = int f0(X_{0,t}, V_{0,t}) dv for a radial field history E.

    Computed as the free-transport closed form plus the flowed-minus-free
    difference on shared nodes, so E = 0 reproduces rho_free exactly.
    """
    quad = quad or ForcingQuadrature()
    radii = np.asarray(radii, dtype=float)
    if f0.is_zero:
        return np.zeros(radii.shape)
    free = gaussian_free_oracle(t, _on_axis(radii), f0.x_profile.scale, f0.v_profile.scale,
                                f0.amplitude)
    return free + _initial_correction(f0, E, t, radii, quad)


def _field_scale(E, s):
    """Spatial extent of E(s) used to size the position box."""
    scale = getattr(E, "spread", None)
    return scale(s) if callable(scale) else 1.0 + s


def s_panels(t: float, per_panel: int = 4):
    """Gauss-Legendre s-nodes on [0, t], panels graded like (1 + s) / 2.

    A break is placed at s = (t - 1) / 2 where the reaction quadrature
    switches from position to velocity nodes.
    """
    edges = [0.0]
    while edges[-1] < t:
        edges.append(edges[-1] + max(0.5, 0.5 * (1.0 + edges[-1])))
    edges[-1] = t
    switch = 0.5 * (t - 1.0)
    if 0.0 < switch < t:
        edges.append(switch)
    edges = np.unique(np.round(edges, 12))
    xr, wr = leggauss(per_panel)
    mids = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * np.diff(edges)
    s = (mids[:, None] + half[:, None] * xr).ravel()
    w = (half[:, None] * wr).ravel()
    return s, w, switch


def _position_nodes(E, t, s, x, quad):
    """Position nodes z = x - (t - s) v at time s, with dv = dz / (t - s)^3."""
    scale = _field_scale(E, s)
    nodes, wts = _plane_nodes(quad.width * scale + 6.0, quad.n_axial, quad.n_perp, 3.0 * scale)
    z = np.broadcast_to(nodes[None], (x.shape[0],) + nodes.shape)
    v = (x[:, None, :] - z) / (t - s)
    return z, v, wts / (t - s) ** 3


def _pair(E, eq, s, z, v, Y, W, wts):
    """Inner integrals of R_L and R_L - R_NL on shared nodes."""
    linear = np.sum(E(s, z) * eq.gradient(v), -1)
    if Y is None:
        return linear @ wts, np.zeros(z.shape[0])
    flowed = np.sum(E(s, z + Y) * eq.gradient(v + W), -1)
    return linear @ wts, (linear - flowed) @ wts


def bilinear_reaction(E, eq: Equilibrium, t: float, radii, quad: ForcingQuadrature | None = None,
                      *, frozen: bool = False):
    """(R_L, R_L - R_NL) at x = r e_1 for a radial field history E.

    Both integrals share every quadrature node, so the difference keeps its
    quadratic smallness.  For s < (t - 1) / 2 the nodes sit in position
    space at time s (where E is localised), later in velocity space.
    ``frozen`` replaces the flow by free transport (Y = W = 0), for which
    the difference vanishes identically.
    """
    quad = quad or ForcingQuadrature()
    radii = np.asarray(radii, dtype=float)
    if getattr(E, "is_zero", False) or t == 0.0:
        return np.zeros(radii.shape), np.zeros(radii.shape)
    x = _on_axis(radii)
    s_nodes, s_w, switch = s_panels(t, quad.per_panel)
    RL = np.zeros(radii.shape)
    T = np.zeros(radii.shape)
    late = s_nodes >= switch
    for s, ws in zip(s_nodes[~late], s_w[~late]):
        z, v, wts = _position_nodes(E, t, s, x, quad)
        Y = W = None
        if not frozen:
            # grad mu is below 1e-14 of its peak beyond |v| = 8 sigma
            keep = np.sum(v * v, -1) <= (8.0 * eq.sigma) ** 2
            Y = np.zeros(z.shape)
            W = np.zeros(z.shape)
            if np.any(keep):
                Y[keep], W[keep] = flow_at_start(E, t, s, np.ascontiguousarray((z - s * v)[keep]),
                                                 np.ascontiguousarray(v[keep]), quad.tol,
                                                 quad.per_panel)
        rl, tt = _pair(E, eq, s, z, v, Y, W, wts)
        RL += ws * rl
        T += ws * tt
    if np.any(late):
        nodes, wts = _plane_nodes(quad.width * eq.sigma, quad.n_axial_v, quad.n_perp_v)
        v = np.ascontiguousarray(np.broadcast_to(nodes[None], (x.shape[0],) + nodes.shape))
        w = x[:, None, :] - t * v
        s_late = s_nodes[late]
        if not frozen:
            Ys, Ws = flow_at_times(E, t, max(switch, 0.0), s_late, w, v, quad.tol,
                                   quad.per_panel)
        for i, (s, ws) in enumerate(zip(s_late, s_w[late])):
            z = w + s * v
            Y = W = None
            if not frozen:
                Y, W = Ys[i], Ws[i]
            rl, tt = _pair(E, eq, s, z, v, Y, W, wts)
            RL += ws * rl
            T += ws * tt
    return RL, T


def _to_grid(grid: RadialGrid, radii, values):
    """Even cubic spline of samples at ``radii``; zero beyond the last sample."""
    spline = CubicSpline(radii, values, bc_type=((1, 0.0), (1, 0.0)))
    r = grid.r
    return np.where(r <= radii[-1], spline(np.minimum(r, radii[-1])), 0.0)


@dataclass
class ForcingDecomposition:
    """I, R_L and T = R_L - R_NL on a common grid; S = I + T."""

    I_term: DensityHistory
    RL_term: DensityHistory
    T_term: DensityHistory
    N: int = 2
    timings: dict = field(default_factory=dict)

    @property
    def RNL_term(self) -> DensityHistory:
        return self.RL_term - self.T_term

    @property
    def S(self) -> DensityHistory:
        return self.I_term + self.T_term

    @property
    def t_grid(self):
        return self.I_term.t_grid

    def ledger(self, which: str = "S"):
        """Y_t^N ledger of a component: running max of weighted derivative norms."""
        hist = self.S if which == "S" else getattr(self, f"{which}_term")
        return hist.ledger(self.N)


def _free_history(f0, t_grid, grid):
    r = _on_axis(grid.r)
    vals = np.array([gaussian_free_oracle(t, r, f0.x_profile.scale, f0.v_profile.scale,
                                          f0.amplitude) for t in t_grid])
    return DensityHistory(t_grid, grid, values=vals)


def assemble_forcing(f0: InitialDatum, eq: Equilibrium, E, t_grid, grid: RadialGrid, *,
                     N: int = 2, quad: ForcingQuadrature | None = None,
                     frozen: bool = False) -> ForcingDecomposition:
    """S = I + R_L - R_NL on ``grid`` at the times ``t_grid``.

    Raises InstabilityError when a ledger entry exceeds 1e6.
    """
    _check_radial_setting(f0, eq)
    if not isinstance(grid, RadialGrid):
        raise CapabilityError("nonlinear forcing is assembled on radial grids", "response")
    quad = quad or ForcingQuadrature()
    t_grid = np.asarray(t_grid, dtype=float)
    shape = (t_grid.size, grid.n)
    dI = np.zeros(shape)
    RL = np.zeros(shape)
    T = np.zeros(shape)
    tic = _time.perf_counter()
    active = not getattr(E, "is_zero", False) and not f0.is_zero
    for n, t in enumerate(t_grid):
        if not active or t == 0.0:
            continue
        radii = output_radii(f0, eq, t, quad)
        dI[n] = _to_grid(grid, radii, _initial_correction(f0, E, t, radii, quad))
        rl, tt = bilinear_reaction(E, eq, t, radii, quad, frozen=frozen)
        RL[n] = _to_grid(grid, radii, rl)
        T[n] = _to_grid(grid, radii, tt)
    I_hist = _free_history(f0, t_grid, grid) if not f0.is_zero else DensityHistory.zeros(t_grid, grid)
    if active:
        I_hist = I_hist + DensityHistory(t_grid, grid, values=dI)
    out = ForcingDecomposition(I_hist, DensityHistory(t_grid, grid, values=RL),
                               DensityHistory(t_grid, grid, values=T), N,
                               {"forcing": _time.perf_counter() - tic})
    led = out.S.ledger(N)
    if np.any(~np.isfinite(led)) or np.any(led > LEDGER_LIMIT):
        raise InstabilityError("forcing ledger diverged", "response")
    return out


# --- bootstrap ----------------------------------------------------------------


@dataclass
class BootstrapState:
    """One outer iterate.  ``N_ledger`` is sup_{s<=t} max_k weighted norms / log(2 + s)."""

    iteration: int
    E: FieldHistory
    rho: DensityHistory
    forcing: ForcingDecomposition
    N_ledger: np.ndarray
    eps0: float
    M0: float
    change: float
    wall_time: float
    change_final: float = math.inf

    @property
    def t_grid(self):
        return self.rho.t_grid

    @property
    def violated(self) -> bool:
        return bool(np.any(self.N_ledger > self.M0 * self.eps0))

    @property
    def N_final(self) -> float:
        return float(self.N_ledger[-1])


def default_radial_grid(T: float = 20.0, f0: InitialDatum | None = None,
                        eq: Equilibrium | None = None, dr: float = 0.4):
    """Radial grid holding rho and G * S up to time T."""
    sx = f0.x_profile.scale if f0 is not None else 1.0
    sv = f0.v_profile.scale if f0 is not None else 1.0
    sm = eq.sigma if eq is not None else 1.0
    radius = 8.0 * (math.hypot(sx, sv * T) + sm * T) + 20.0
    return RadialGrid(int(math.ceil(radius / dr)), dr)


def normalized_datum(eps0: float, d: int = 3, N: int = 2, sigma_x: float = 1.0,
                     sigma_v: float = 1.0) -> InitialDatum:
    """Gaussian datum scaled so that its derivative ledger equals eps0."""
    from .transport import make_initial_datum
    base = make_initial_datum("gaussian", d, sigma_x=sigma_x, sigma_v=sigma_v)
    return base.scaled(eps0 / base.epsilon(N))


def _radial_zero_field(t_grid, grid):
    q = np.zeros((len(t_grid), grid.n + 1))
    return FieldHistory.from_radial(t_grid, grid, q)


def bootstrap_run(f0: InitialDatum, eq: Equilibrium, res: ResolventTable, T: float = 20.0,
                  max_iter: int = 8, eps0: float = 1e-3, M0: float = 100.0, *,
                  N: int = 2, grid: RadialGrid | None = None, dt: float = DT_NONLINEAR,
                  rtol: float = 1e-6, quad: ForcingQuadrature | None = None,
                  callback=None) -> list[BootstrapState]:
    """Picard iteration E -> S -> rho -> E starting from E = 0.

    ``res`` must carry the grid's |xi| values and a time grid containing
    the nonlinear grid ``0, dt, .., T``.  Stops when N(T) changes by less than
    ``rtol`` relatively, or after ``max_iter`` iterates.
    """
    if eps0 <= 0 or M0 <= 0:
        raise ParameterError("eps0 and M0 must be positive", "response")
    _check_radial_setting(f0, eq)
    grid = grid or default_radial_grid(T, f0, eq)
    t_nl = dt * np.arange(int(round(T / dt)) + 1)
    n_fine = int(round(T / res.dt)) + 1
    if n_fine > res.t_grid.size:
        raise ConfigurationError("resolvent horizon shorter than T", "response")
    t_fine = res.t_grid[:n_fine]
    E = _radial_zero_field(t_nl, grid)
    states = []
    prev = prev_final = None
    for it in range(1, max_iter + 1):
        tic = _time.perf_counter()
        forcing = assemble_forcing(f0, eq, E, t_nl, grid, N=N, quad=quad)
        rho_fine = linear_response(forcing.S.refine(t_fine), res)
        rho = rho_fine.restrict(t_nl)
        led = rho.ledger(N, log_weight=True)
        if np.any(~np.isfinite(led)):
            raise InstabilityError("density ledger is not finite", "response")
        cur = float(led[-1])
        final = float(weighted_norms(t_nl[-1:], rho.derivative_norms(N)[-1:], rho.dimension,
                                     log_weight=True)[0])
        change = math.inf if prev is None else abs(cur - prev) / max(abs(cur), 1e-300)
        change_final = (math.inf if prev_final is None
                        else abs(final - prev_final) / max(abs(final), 1e-300))
        state = BootstrapState(it, E, rho, forcing, led, eps0, M0, change,
                               _time.perf_counter() - tic, change_final)
        states.append(state)
        if callback is not None:
            callback(state)
        if f0.is_zero or change < rtol:
            break
        prev, prev_final = cur, final
        E = field_from_density(rho)
        E.spread = lambda s, f0=f0: _spread(f0, s)
    return states


__all__ = [
    "DT_NONLINEAR", "LEDGER_LIMIT", "BootstrapState", "DensityHistory", "ForcingDecomposition",
    "ForcingQuadrature", "assemble_forcing", "bilinear_reaction", "bootstrap_run",
    "default_radial_grid", "duhamel_residual", "field_from_density", "grid_radii",
    "initial_term", "linear_response", "normalized_datum", "output_radii",
    "resolvent_for_grid", "running_ledger", "s_panels", "weighted_norms",
]
