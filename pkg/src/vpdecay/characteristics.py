"""Characteristics of the force field in straightened coordinates.

With x = w + t v the backward flow from time t reads

    X_{s,t} = w + s v + Y_s,   V_{s,t} = v + W_s,
    Y_s = int_s^t (tau - s) E(tau, w + tau v + Y_tau) dtau,
    W_s = -int_s^t E(tau, w + tau v + Y_tau) dtau.

Y is found by Picard iteration on Gauss-Legendre panels (4 nodes per unit
time).  Values at arbitrary s use panel-wise Lagrange integration of the
converged integrand, so Y and W are evaluated on any s grid without
re-solving.  v-derivatives come from nested central differences on jointly
solved stencil points.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial.legendre import leggauss
from scipy.ndimage import map_coordinates

from .equilibria import multi_indices, multinomial
from .errors import DivergenceError, DomainError, InvertibilityError, ParameterError


class StencilWarning(UserWarning):
    pass


# --- field histories ---------------------------------------------------------


class AnalyticField:
    """E(s, x) from callables; gradient/hessian optional (needed for identities).

    ``gradient`` returns d_b E^a with shape (..., a, b); ``hessian`` returns
    d_b d_c E^a with shape (..., a, b, c).
    """

    def __init__(self, dimension: int, func: Callable, grad: Callable | None = None,
                 hess: Callable | None = None, zero: bool = False, ledger: Callable | None = None):
        self.dimension = dimension
        self._func, self._grad, self._hess = func, grad, hess
        self.is_zero = zero
        self._ledger = ledger

    def __call__(self, s, x):
        return self._func(s, np.asarray(x, dtype=float))

    def gradient(self, s, x):
        if self._grad is None:
            raise ParameterError("field has no analytic gradient", "characteristics")
        return self._grad(s, np.asarray(x, dtype=float))

    def hessian(self, s, x):
        if self._hess is None:
            raise ParameterError("field has no analytic hessian", "characteristics")
        return self._hess(s, np.asarray(x, dtype=float))

    def sup_norm(self, s, k: int = 0) -> float:
        if self._ledger is None:
            raise ParameterError("field has no sup-norm ledger", "characteristics")
        return self._ledger(s, k)


def zero_field(d: int = 3) -> AnalyticField:
    z = lambda s, x: np.zeros(np.shape(x))
    return AnalyticField(d, z, lambda s, x: np.zeros(np.shape(x) + (d,)),
                         lambda s, x: np.zeros(np.shape(x) + (d, d)), zero=True,
                         ledger=lambda s, k: 0.0)


def constant_field(e0, time_factor: Callable | None = None) -> AnalyticField:
    """E(s, x) = e0 * time_factor(s), independent of x."""
    e0 = np.asarray(e0, dtype=float)
    d = e0.size
    tf = (lambda s: 1.0) if time_factor is None else time_factor

    def func(s, x):
        return np.broadcast_to(e0 * tf(s), np.shape(x)).copy()

    return AnalyticField(d, func, lambda s, x: np.zeros(np.shape(x) + (d,)),
                         lambda s, x: np.zeros(np.shape(x) + (d, d)),
                         ledger=lambda s, k: float(np.linalg.norm(e0) * abs(tf(s))) if k == 0 else 0.0)


def synthetic_field(eps: float, d: int = 3) -> AnalyticField:
    """Decaying field saturating the assumed rates.

    E(s, x) = eps log(2+s) (1+s)^{-d} y exp(-|y|^2/2), y = x/(1+s), so that
    ||grad^k E(s)||_inf = c_k eps log(2+s) (1+s)^{-d-k}.
    """

    def amp(s):
        return eps * math.log(2.0 + s) * (1.0 + s) ** (-d)

    def func(s, x):
        L = 1.0 + s
        y = x / L
        g = np.exp(-0.5 * np.sum(y * y, -1))
        return amp(s) * y * g[..., None]

    def grad(s, x):
        L = 1.0 + s
        y = x / L
        g = np.exp(-0.5 * np.sum(y * y, -1))[..., None, None]
        eye = np.eye(d)
        return amp(s) / L * (eye - y[..., :, None] * y[..., None, :]) * g

    def hess(s, x):
        L = 1.0 + s
        y = x / L
        g = np.exp(-0.5 * np.sum(y * y, -1))[..., None, None, None]
        eye = np.eye(d)
        ya = y[..., :, None, None]
        yb = y[..., None, :, None]
        yc = y[..., None, None, :]
        t = -eye[:, :, None] * yc - eye[:, None, :] * yb - eye[None, :, :] * ya + ya * yb * yc
        return amp(s) / L**2 * t * g

    # sup_y |grad^k (y e^{-|y|^2/2})| for k = 0, 1, 2 (Frobenius), attained on rays
    consts = {0: math.exp(-0.5), 1: 1.0, 2: math.sqrt(3.0)}

    def ledger(s, k):
        return consts.get(k, math.nan) * amp(s) / (1.0 + s) ** k

    return AnalyticField(d, func, grad, hess, ledger=ledger)


class FieldHistory:
    """Sampled E(s, x) with cubic interpolation in x and linear in s.

    Two layouts: ``radial`` stores q(s, r) with E = q(s, |x|) x (d = 3,
    curl-free isotropic fields), ``cartesian`` stores all components on a
    CartesianGrid.
    """

    def __init__(self, t_grid, grid, samples, layout: str, ledger: dict | None = None):
        self.t_grid = np.asarray(t_grid, dtype=float)
        self.grid = grid
        self.samples = np.asarray(samples, dtype=float)
        self.layout = layout
        self.dimension = grid.dimension
        self.ledger = ledger or {}
        self.is_zero = not np.any(self.samples)
        # radial histories use the compiled per-point Picard solve when True
        self.compiled = True
        steps = np.diff(self.t_grid)
        self.uniform_times = bool(steps.size == 0 or np.allclose(steps, steps[0], rtol=1e-10))
        if layout == "radial":
            # q on r_j = j dr, j = 0..n, padded with zeros beyond the grid
            self._dr = float(grid.dr)
            self._r_max = float(grid.dr * (self.samples.shape[-1] - 1))
            pad = np.zeros((self.samples.shape[0], self.samples.shape[-1] + 3))
            pad[:, :self.samples.shape[-1]] = self.samples
            self._table = pad
        elif layout == "cartesian":
            self._coeffs = None
        else:
            raise ParameterError(f"unknown layout {layout!r}", "characteristics")

    @classmethod
    def from_radial(cls, t_grid, grid, q_with_origin, ledger=None):
        """``q_with_origin[n]`` holds q(s_n, r) at r = 0 followed by grid.r."""
        return cls(t_grid, grid, q_with_origin, "radial", ledger)

    def _stencil(self, r):
        u = r / self._dr
        j = np.floor(u).astype(np.int64)
        f = u - j
        fm, fp, f2 = f - 1.0, f + 1.0, f - 2.0
        w = (-f * fm * f2 / 6.0, 0.5 * fp * fm * f2, -0.5 * fp * f * f2, fp * f * fm / 6.0)
        last = self._table.shape[1] - 1
        idx = [np.minimum(np.abs(j + off), last) for off in (-1, 0, 1, 2)]
        return idx, w, r <= self._r_max

    def _radial_q(self, rows, r, stencil=None):
        """Uniform 4-point cubic interpolation of q, even in r; ``rows`` broadcasts with r."""
        idx, w, inside = self._stencil(r) if stencil is None else stencil
        ncol = self._table.shape[1]
        flat = self._table.ravel()
        base = rows * ncol
        out = w[0] * flat[base + idx[0]]
        for k in range(1, 4):
            out += w[k] * flat[base + idx[k]]
        return np.where(inside, out, 0.0)

    def _time_weights(self, s):
        tg = self.t_grid
        s = np.clip(np.asarray(s, dtype=float), tg[0], tg[-1])
        n = np.clip(np.searchsorted(tg, s, side="right") - 1, 0, max(len(tg) - 2, 0))
        if len(tg) == 1:
            return n, np.zeros_like(s)
        lam = (s - tg[n]) / (tg[n + 1] - tg[n])
        return n, lam

    def eval_nodes(self, tau, pos):
        """E(tau_j, pos[j]) for an array of times, pos shape (len(tau), ..., d)."""
        tau = np.asarray(tau, dtype=float)
        if self.layout != "radial":
            return np.stack([self(tj, pos[j]) for j, tj in enumerate(tau)])
        n, lam = self._time_weights(tau)
        shape = (-1,) + (1,) * (pos.ndim - 2)
        n = n.reshape(shape)
        lam = lam.reshape(shape)
        r = np.sqrt(np.einsum("...i,...i->...", pos, pos))
        st = self._stencil(r)
        q = (1.0 - lam) * self._radial_q(n, r, st)
        if len(self.t_grid) > 1:
            q = q + lam * self._radial_q(np.minimum(n + 1, len(self.t_grid) - 1), r, st)
        return q[..., None] * pos

    def _slice(self, n, x):
        if self.layout == "radial":
            r = np.sqrt(np.sum(x * x, -1))
            return self._radial_q(np.full(r.shape, n), r)[..., None] * x
        g = self.grid
        idx = (x / g.dx) + g.n // 2
        coords = np.moveaxis(idx, -1, 0).reshape(self.dimension, -1)
        out = np.empty(x.shape)
        for a in range(self.dimension):
            vals = map_coordinates(self.samples[n, ..., a], coords, order=3, mode="grid-wrap")
            out[..., a] = vals.reshape(x.shape[:-1])
        return out

    def __call__(self, s, x):
        x = np.asarray(x, dtype=float)
        if self.layout == "radial":
            return self.eval_nodes(np.array([s]), x[None])[0]
        tg = self.t_grid
        if s <= tg[0]:
            return self._slice(0, x)
        if s >= tg[-1]:
            return self._slice(len(tg) - 1, x)
        n = int(np.searchsorted(tg, s) - 1)
        lam = (s - tg[n]) / (tg[n + 1] - tg[n])
        out = (1.0 - lam) * self._slice(n, x)
        if lam > 0:
            out = out + lam * self._slice(n + 1, x)
        return out


# --- panel quadrature --------------------------------------------------------


@lru_cache(maxsize=8)
def _reference(n_gl: int):
    x, w = leggauss(n_gl)
    anti = []
    for k in range(n_gl):
        others = np.delete(x, k)
        p = Polynomial.fromroots(others)
        p = p / p(x[k])
        anti.append(p.integ())
    return x, w, anti


@dataclass(frozen=True)
class TimeNodes:
    t: float
    edges: np.ndarray
    nodes: np.ndarray
    per_panel: int

    @property
    def start(self) -> float:
        return float(self.edges[0])

    def tail_matrix(self, s_values) -> np.ndarray:
        """C[i, j] with int_{s_i}^t g = sum_j C[i, j] g(nodes_j), exact for panel cubics."""
        xr, wr, anti = _reference(self.per_panel)
        s_values = np.atleast_1d(np.asarray(s_values, dtype=float))
        C = np.zeros((s_values.size, self.nodes.size))
        n_p = self.edges.size - 1
        for i, s in enumerate(s_values):
            if s < self.start - 1e-12 or s > self.t + 1e-12:
                raise DomainError(f"s = {s} outside [{self.start}, {self.t}]", "characteristics")
            if s >= self.t:
                continue
            p = min(int(np.searchsorted(self.edges, s, side="right") - 1), n_p - 1)
            a, b = self.edges[p], self.edges[p + 1]
            half = 0.5 * (b - a)
            xi = (s - a) / half - 1.0
            sl = slice(p * self.per_panel, (p + 1) * self.per_panel)
            C[i, sl] = [half * (L(1.0) - L(xi)) for L in anti]
            for q in range(p + 1, n_p):
                hq = 0.5 * (self.edges[q + 1] - self.edges[q])
                C[i, q * self.per_panel:(q + 1) * self.per_panel] = hq * wr
        return C

    def tail_apply(self, g):
        """int_{tau_j}^t g for every node tau_j, in O(n) work."""
        xr, wr, anti = _local_tail(self.per_panel)
        n_p = self.edges.size - 1
        m = self.per_panel
        G = g.reshape((n_p, m) + g.shape[1:])
        half = 0.5 * np.diff(self.edges)
        hb = half.reshape((n_p,) + (1,) * (g.ndim - 1))
        full = np.tensordot(wr, G, axes=(0, 1)) * hb
        suffix = np.cumsum(full[::-1], axis=0)[::-1]
        after = np.concatenate([suffix[1:], np.zeros_like(suffix[:1])])
        local = np.einsum("jk,pk...->pj...", anti, G) * hb[:, None]
        return (local + after[:, None]).reshape(g.shape)

    def total(self, g):
        """int_start^t g."""
        _, wr, _ = _reference(self.per_panel)
        n_p = self.edges.size - 1
        G = g.reshape((n_p, self.per_panel) + g.shape[1:])
        half = 0.5 * np.diff(self.edges).reshape((n_p,) + (1,) * (g.ndim - 1))
        return np.sum(np.tensordot(wr, G, axes=(0, 1)) * half, axis=0)


@lru_cache(maxsize=8)
def _local_tail(n_gl: int):
    """A[j, k] = int_{x_j}^1 l_k on the reference panel."""
    xr, wr, anti = _reference(n_gl)
    A = np.array([[L(1.0) - L(xj) for L in anti] for xj in xr])
    return xr, wr, A


def time_nodes(t: float, per_unit: int = 4, start: float = 0.0) -> TimeNodes:
    """Gauss-Legendre panels of at most unit length (4 nodes each) on [start, t]."""
    span = t - start
    n_p = max(1, int(math.ceil(span - 1e-12)))
    edges = np.linspace(start, t, n_p + 1)
    xr, _, _ = _reference(per_unit)
    mids = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    nodes = (mids[:, None] + half[:, None] * xr[None, :]).ravel()
    return TimeNodes(float(t), edges, nodes, per_unit)


# --- Picard solve ------------------------------------------------------------


@dataclass
class CharacteristicsSolution:
    """Y, W on (s; points) for a final time t.

    ``w`` and ``v`` are paired (M, d) arrays; x = w + t v.  ``F`` holds the
    converged integrand E(tau, w + tau v + Y_tau) at the time nodes so Y and
    W can be evaluated at any s.
    """

    field: object
    t: float
    w: np.ndarray
    v: np.ndarray
    s_grid: np.ndarray
    Y: np.ndarray
    W: np.ndarray
    iterations: int
    tol: float
    nodes: TimeNodes
    F: np.ndarray
    residual: float = 0.0
    stacks: dict = field(default_factory=dict)

    @property
    def x(self):
        return self.w + self.t * self.v

    def at(self, s_values):
        """(Y, W) at arbitrary s in [0, t]."""
        C = self.nodes.tail_matrix(s_values)
        return _assemble(C, np.atleast_1d(np.asarray(s_values, float)), self.nodes.nodes, self.F)

    def reconstruct(self, s_values):
        """(X_{s,t}, V_{s,t}) in original variables."""
        s_values = np.atleast_1d(np.asarray(s_values, dtype=float))
        Y, W = self.at(s_values)
        X = self.w[None] + s_values[:, None, None] * self.v[None] + Y
        return X, self.v[None] + W


def _assemble(C, s_values, tau, F):
    flat = F.reshape(F.shape[0], -1)
    a = C @ (tau[:, None] * flat)
    b = C @ flat
    Y = a - s_values[:, None] * b
    W = -b
    shape = (len(s_values),) + F.shape[1:]
    return Y.reshape(shape), W.reshape(shape)


def _field_at_nodes(E, tau, pos):
    """E(tau_j, pos[j]) for all nodes; vectorised when the field supports it."""
    if hasattr(E, "eval_nodes"):
        return E.eval_nodes(tau, pos)
    out = np.empty_like(pos)
    for j, tj in enumerate(tau):
        out[j] = E(tj, pos[j])
    return out


def _node_update(nodes, F):
    tau = nodes.nodes.reshape((-1,) + (1,) * (F.ndim - 1))
    return nodes.tail_apply(tau * F) - tau * nodes.tail_apply(F)


def _picard(E, nodes: TimeNodes, w, v, tol, max_iter):
    tau = nodes.nodes
    tb = tau.reshape((-1,) + (1,) * w.ndim)
    base = w[None] + tb * v[None]
    Y = np.zeros((tau.size,) + w.shape)
    diffs = []
    for it in range(1, max_iter + 1):
        F = _field_at_nodes(E, tau, base + Y)
        Y_new = _node_update(nodes, F)
        diff = float(np.max(np.abs(Y_new - Y))) if Y.size else 0.0
        Y = Y_new
        diffs.append(diff)
        if not np.isfinite(diff):
            raise DivergenceError("Picard iterate is not finite", "characteristics")
        floor = 8.0 * np.finfo(float).eps * (float(np.max(np.abs(Y))) if Y.size else 0.0)
        if diff < tol + floor:
            # refresh the integrand at the converged Y
            F = _field_at_nodes(E, tau, base + Y)
            return Y, F, it, diff
        if it >= 8 and diff > diffs[it - 6]:
            raise DivergenceError(f"no contraction after {it} iterations (diff {diff:.2e}); "
                                  "field amplitude too large", "characteristics")
    raise DivergenceError(f"no convergence in {max_iter} iterations (diff {diffs[-1]:.2e})",
                          "characteristics")


def _use_compiled(E, w) -> bool:
    return (isinstance(E, FieldHistory) and E.layout == "radial" and E.compiled
            and w.shape[-1] == 3 and E.uniform_times)


def _compiled_flow(E, nodes: TimeNodes, s_values, w, v, tol):
    from ._radial_flow import radial_flow

    xr, wr, A = _local_tail(nodes.per_panel)
    C = nodes.tail_matrix(s_values)
    flat_w = np.ascontiguousarray(w.reshape(-1, 3), dtype=float)
    flat_v = np.ascontiguousarray(np.broadcast_to(v, w.shape).reshape(-1, 3), dtype=float)
    tg = E.t_grid
    dt = float(tg[1] - tg[0]) if tg.size > 1 else 1.0
    Y, W, iters, ok = radial_flow(E._table, E._dr, E._r_max, float(tg[0]), dt, tg.size,
                                  nodes.nodes,
                                  0.5 * np.diff(nodes.edges), wr, A, C, s_values,
                                  flat_w, flat_v, float(tol), 50)
    if not np.all(ok):
        raise DivergenceError(f"Picard failed at {int(np.sum(~ok))} points; field amplitude "
                              "too large", "characteristics")
    shape = (s_values.size,) + w.shape
    return Y.reshape(shape), W.reshape(shape)


def flow_at_times(E, t: float, start: float, s_values, w, v, tol: float = 1e-12,
                  per_unit: int = 4):
    """(Y_{s,t}, W_{s,t}) at several times s >= start from one Picard solve on [start, t]."""
    s_values = np.atleast_1d(np.asarray(s_values, dtype=float))
    shape = (s_values.size,) + w.shape
    if start >= t or getattr(E, "is_zero", False):
        return np.zeros(shape), np.zeros(shape)
    nodes = time_nodes(t, per_unit, start=start)
    if _use_compiled(E, w):
        return _compiled_flow(E, nodes, s_values, w, v, tol)
    _, F, _, _ = _picard(E, nodes, w, v, tol, 50)
    C = nodes.tail_matrix(s_values)
    tb = nodes.nodes.reshape((-1,) + (1,) * w.ndim)
    CF = np.tensordot(C, F, axes=(1, 0))
    CtF = np.tensordot(C, tb * F, axes=(1, 0))
    sb = s_values.reshape((-1,) + (1,) * w.ndim)
    return CtF - sb * CF, -CF


def flow_at_start(E, t: float, s: float, w, v, tol: float = 1e-12, per_unit: int = 4):
    """(Y_{s,t}, W_{s,t}) at the single time s for paired points (w, v)."""
    Y, W = flow_at_times(E, t, s, [s], w, v, tol, per_unit)
    return Y[0], W[0]


def picard_solve_characteristics(E, t: float, grid, tol: float = 1e-12, s_grid=None, *,
                                 max_iter: int = 50, per_unit: int = 4) -> CharacteristicsSolution:
    """Fixed point for Y on the paired (w, v) points of ``grid``.

    ``grid`` is a pair (w, v) of (M, d) arrays.  ``s_grid`` defaults to 41
    points on [0, t].
    """
    if not tol > 0:
        raise ParameterError("tol must be positive", "characteristics")
    if t < 0:
        raise DomainError("final time must be >= 0", "characteristics")
    w, v = (np.atleast_2d(np.asarray(a, dtype=float)) for a in grid)
    if w.shape != v.shape:
        raise ParameterError("w and v point arrays must have equal shapes", "characteristics")
    s_grid = np.linspace(0.0, t, 41) if s_grid is None else np.asarray(s_grid, dtype=float)
    nodes = time_nodes(t, per_unit) if t > 0 else None
    if t == 0 or getattr(E, "is_zero", False):
        F = np.zeros(((nodes.nodes.size if nodes else 0),) + w.shape)
        Y = np.zeros((s_grid.size,) + w.shape)
        return CharacteristicsSolution(E, t, w, v, s_grid, Y, Y.copy(), 1, tol,
                                       nodes or time_nodes(1.0, per_unit), F)
    Yn, F, it, _ = _picard(E, nodes, w, v, tol, max_iter)
    C = nodes.tail_matrix(s_grid)
    Y, W = _assemble(C, s_grid, nodes.nodes, F)
    # fixed-point residual at the nodes with the refreshed integrand
    res = float(np.max(np.abs(_node_update(nodes, F) - Yn))) if Yn.size else 0.0
    return CharacteristicsSolution(E, t, w, v, s_grid, Y, W, it, tol, nodes, F, res)


def solve_points(sol: CharacteristicsSolution, w, v, s_values=None):
    """Y, W for new (w, v) points, same field, time and tolerance."""
    s_values = sol.s_grid if s_values is None else s_values
    new = picard_solve_characteristics(sol.field, sol.t, (w, v), sol.tol, s_values,
                                       per_unit=sol.nodes.per_panel)
    return new.Y, new.W


# --- derivatives -------------------------------------------------------------

_STENCILS = {
    0: {0: 1.0},
    1: {-1: -0.5, 1: 0.5},
    2: {-1: 1.0, 0: -2.0, 1: 1.0},
    3: {-2: -0.5, -1: 1.0, 1: -1.0, 2: 0.5},
}


def _stencil(alpha):
    """Offsets (tuples) and weights of the tensor central difference for d^alpha."""
    per_axis = [list(_STENCILS[a].items()) for a in alpha]
    out = {}
    for combo in itertools.product(*per_axis):
        off = tuple(o for o, _ in combo)
        out[off] = out.get(off, 0.0) + math.prod(c for _, c in combo)
    return out


def _sym_tensor(values_by_alpha, k, d, lead_shape):
    """Fill the symmetric k-tensor (last k axes) from multi-index values."""
    out = np.empty(lead_shape + (d,) * k)
    for idx in itertools.product(range(d), repeat=k):
        alpha = [0] * d
        for i in idx:
            alpha[i] += 1
        out[(Ellipsis,) + idx] = values_by_alpha[tuple(alpha)]
    return out


@dataclass
class DerivativeStacks:
    """grad_v^k Y and grad_v^k W as full tensors, plus grad_x Y.

    ``Y[k]`` has shape (n_s, M, d, d, ..., d) with k trailing v-indices;
    ``node_Y[k]`` holds the same at the time nodes.
    """

    h: float
    Y: dict
    W: dict
    node_Y: dict
    grad_x_Y: np.ndarray
    warnings: list

    def sup(self, which: str, k: int):
        """Sup over points of the Frobenius norm, per s."""
        arr = (self.Y if which == "Y" else self.W)[k]
        axes = tuple(range(2, arr.ndim))
        return np.sqrt(np.sum(arr**2, axis=axes)).max(axis=1)

    def sup_grad_x(self):
        return np.sqrt(np.sum(self.grad_x_Y**2, axis=(2, 3))).max(axis=1)


def differentiate_characteristics(sol: CharacteristicsSolution, k: int, h: float = 0.05):
    """Nested central differences of Y, W in v (orders 0..k) and of Y in x.

    All stencil points are solved jointly with the base solution's field,
    time and tolerance.  Results are cached on ``sol.stacks``.
    """
    if k > 3 or k < 0:
        raise ParameterError("derivative order must be in 0..3", "characteristics")
    d = sol.w.shape[1]
    M = sol.w.shape[0]
    alphas = [a for m in range(k + 1) for a in multi_indices(m, d)]
    stencils = {a: _stencil(a) for a in alphas}
    offsets = sorted({o for st in stencils.values() for o in st})
    x_offsets = [tuple(int(j == i) * sgn for j in range(d)) for i in range(d) for sgn in (-1, 1)]
    index = {o: n for n, o in enumerate(offsets)}
    off = np.array(offsets, dtype=float) * h
    xo = np.array(x_offsets, dtype=float) * h
    # stencil points: v shifted at fixed w, then w shifted at fixed v
    W_pts = np.concatenate([np.repeat(sol.w[None], len(offsets), 0),
                            sol.w[None] + xo[:, None, :]]).reshape(-1, d)
    V_pts = np.concatenate([sol.v[None] + off[:, None, :],
                            np.repeat(sol.v[None], len(x_offsets), 0)]).reshape(-1, d)
    big = picard_solve_characteristics(sol.field, sol.t, (W_pts, V_pts), min(sol.tol, 1e-14),
                                       sol.s_grid, per_unit=sol.nodes.per_panel)
    n_v = len(offsets)
    Ys = big.Y.reshape((sol.s_grid.size, n_v + len(x_offsets), M, d))
    Ws = big.W.reshape(Ys.shape)
    tau = big.nodes.nodes
    Yn = _node_update(big.nodes, big.F)
    Yn = Yn.reshape((tau.size, n_v + len(x_offsets), M, d))
    stacks_Y, stacks_W, stacks_N, notes = {}, {}, {}, []
    scale = float(np.max(np.abs(Ys))) if Ys.size else 0.0
    for m in range(k + 1):
        byY, byW, byN = {}, {}, {}
        for a in multi_indices(m, d):
            st = stencils[a]
            accY = sum(c * Ys[:, index[o]] for o, c in st.items()) / h**m
            accW = sum(c * Ws[:, index[o]] for o, c in st.items()) / h**m
            accN = sum(c * Yn[:, index[o]] for o, c in st.items()) / h**m
            byY[a], byW[a], byN[a] = accY, accW, accN
            if m > 0 and scale > 0:
                noise = 1e-15 * scale * sum(abs(c) for c in st.values()) / h**m
                peak = float(np.max(np.abs(accY)))
                if 0 < peak < 10.0 * noise:
                    notes.append(f"d^{a} Y is within 10x of the rounding floor")
        stacks_Y[m] = _sym_tensor(byY, m, d, (sol.s_grid.size, M, d))
        stacks_W[m] = _sym_tensor(byW, m, d, (sol.s_grid.size, M, d))
        stacks_N[m] = _sym_tensor(byN, m, d, (tau.size, M, d))
    gx = np.empty((sol.s_grid.size, M, d, d))
    for i in range(d):
        plus = Ys[:, n_v + 2 * i + 1]
        minus = Ys[:, n_v + 2 * i]
        gx[..., i] = (plus - minus) / (2.0 * h)
    for msg in notes:
        warnings.warn(msg, StencilWarning)
    out = DerivativeStacks(h, stacks_Y, stacks_W, stacks_N, gx, notes)
    sol.stacks[k] = out
    return out


def order2_identity_residual(sol: CharacteristicsSolution, stacks: DerivativeStacks):
    """Compare the FD Hessian of Y in v with its integral identity.

    d2 Y^a/dv_i dv_j (s) = int_s^t (tau - s) [ d_b d_c E^a (tau d_bi + dY^b_i)(tau d_cj + dY^c_j)
                                              + d_b E^a d2 Y^b_ij ] dtau
    evaluated on the time nodes with FD data for dY and d2Y.  Returns
    (max abs residual, max abs Hessian).
    """
    E = sol.field
    nodes = sol.nodes
    tau = nodes.nodes
    d = sol.w.shape[1]
    Y0 = stacks.node_Y[0]
    D1 = stacks.node_Y[1]          # (n_tau, M, a, i)
    D2 = stacks.node_Y[2]          # (n_tau, M, a, i, j)
    eye = np.eye(d)
    integrand = np.empty_like(D2)
    for n, tn in enumerate(tau):
        pos = sol.w + tn * sol.v + Y0[n]
        gE = E.gradient(tn, pos)     # (M, a, b)
        hE = E.hessian(tn, pos)      # (M, a, b, c)
        A = tn * eye[None] + D1[n]   # (M, b, i)
        term1 = np.einsum("mabc,mbi,mcj->maij", hE, A, A)
        term2 = np.einsum("mab,mbij->maij", gE, D2[n])
        integrand[n] = term1 + term2
    C = nodes.tail_matrix(sol.s_grid)
    rhs, _ = _assemble(C, sol.s_grid, tau, integrand)
    lhs = stacks.Y[2]
    return float(np.max(np.abs(lhs - rhs))), float(np.max(np.abs(lhs)))


# --- Phi and the straightening map -------------------------------------------


def phi_field(sol: CharacteristicsSolution, strict: bool = False):
    """Phi_{s,t} = -Y_{s,t}/(t - s) on the solution's (s; points).

    The row s = t is 0 by continuity; ``strict`` raises instead.
    """
    gap = sol.t - sol.s_grid
    if strict and np.any(gap <= 0):
        raise DomainError("Phi is degenerate at s = t", "characteristics")
    out = np.zeros_like(sol.Y)
    ok = gap > 0
    out[ok] = -sol.Y[ok] / gap[ok][:, None, None]
    return out


def _phi_at(sol, s, x, v):
    """Phi_{s,t}(x, v) for arbitrary points (x, v); solves fresh characteristics."""
    w = x - sol.t * v
    Y, _ = solve_points(sol, w, v, np.array([s]))
    return -Y[0] / (sol.t - s)


def _phi_jacobian(sol, s, x, v, h):
    M, d = x.shape
    shifts = np.concatenate([h * np.eye(d), -h * np.eye(d)])
    xs = np.repeat(x[None], 2 * d, 0).reshape(-1, d)
    vs = (v[None] + shifts[:, None, :]).reshape(-1, d)
    P = _phi_at(sol, s, xs, vs).reshape(2 * d, M, d)
    J = (P[:d] - P[d:]) / (2.0 * h)          # (i, M, a): d Phi^a / d v_i
    return np.transpose(J, (1, 2, 0))          # (M, a, i)


@dataclass
class StraighteningResult:
    psi: np.ndarray
    residual: float
    iterations: int
    grad_phi_sup: float
    phi_sup: float


def straighten_map(sol: CharacteristicsSolution, s: float, x, v, newton_tol: float = 1e-10, *,
                   h: float = 1e-4, max_iter: int = 30) -> StraighteningResult:
    """Solve v' + Phi_{s,t}(x, v') = v by Newton, i.e. X_{s,t}(x, Psi) = x - (t - s) v."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    gap = sol.t - s
    if gap < 0 or s < 0:
        raise DomainError("need 0 <= s <= t", "characteristics")
    if gap == 0 or getattr(sol.field, "is_zero", False):
        return StraighteningResult(v.copy(), 0.0, 0, 0.0, 0.0)
    J0 = _phi_jacobian(sol, s, x, v, h)
    g0 = float(np.max(np.linalg.norm(J0, ord=2, axis=(1, 2))))
    if g0 >= 0.5:
        raise InvertibilityError(f"|grad_v Phi| = {g0:.3f} >= 1/2", "characteristics")
    psi = v.copy()
    phi = _phi_at(sol, s, x, psi)
    phi_sup = float(np.max(np.linalg.norm(phi, axis=-1)))
    grad_sup = g0
    for it in range(1, max_iter + 1):
        r = psi + phi - v
        resid = gap * float(np.max(np.linalg.norm(r, axis=-1)))
        if resid < newton_tol:
            return StraighteningResult(psi, resid, it - 1, grad_sup, phi_sup)
        J = _phi_jacobian(sol, s, x, psi, h)
        grad_sup = max(grad_sup, float(np.max(np.linalg.norm(J, ord=2, axis=(1, 2)))))
        if grad_sup >= 0.5:
            raise InvertibilityError(f"|grad_v Phi| = {grad_sup:.3f} >= 1/2", "characteristics")
        step = np.linalg.solve(np.eye(x.shape[1])[None] + J, r[..., None])[..., 0]
        psi = psi - step
        phi = _phi_at(sol, s, x, psi)
        phi_sup = max(phi_sup, float(np.max(np.linalg.norm(phi, axis=-1))))
    resid = gap * float(np.max(np.linalg.norm(psi + phi - v, axis=-1)))
    if resid >= newton_tol:
        raise InvertibilityError(f"Newton stalled at residual {resid:.2e}", "characteristics")
    return StraighteningResult(psi, resid, max_iter, grad_sup, phi_sup)


# --- decay report ------------------------------------------------------------


def phase_points(d: int = 3, n: int = 48, w_scale: float = 2.0, v_scale: float = 1.5, seed: int = 0):
    """Deterministic sample of (w, v) pairs: the origin, axis points and a Halton-like cloud."""
    rng = np.random.default_rng(seed)
    w = rng.uniform(-w_scale, w_scale, size=(n, d))
    v = rng.uniform(-v_scale, v_scale, size=(n, d))
    w[0] = 0.0
    v[0] = 0.0
    for i in range(min(d, n - 1)):
        w[i + 1] = 0.0
        w[i + 1, i] = 1.0
        v[i + 1] = 0.0
    return w, v


@dataclass
class CharacteristicsReport:
    """Rows (t, s, k, supY_k, supW_k, supGradxY) and envelope ratios.

    Ratios: supY_k (1+s)^{d-2} / (eps log(2+s)) and supW_k (1+s)^{d-1} / (eps log(2+s)),
    likewise supGradxY (1+s)^{d-1} / (eps log(2+s)).
    """

    eps: float
    d: int
    rows: list
    ratio_Y: dict
    ratio_W: dict
    ratio_gx: dict
    iterations: dict

    def max_ratio(self, which: str, k: int | None = None, t: float | None = None):
        table = {"Y": self.ratio_Y, "W": self.ratio_W, "gx": self.ratio_gx}[which]
        vals = [v for (tt, kk), v in table.items()
                if (k is None or kk == k) and (t is None or tt == t)]
        return float(max(np.max(a) for a in vals)) if vals else 0.0


def characteristics_decay_report(E, t_values, k_max: int, points=None, eps: float | None = None,
                                 n_s: int = 41, h: float = 0.05, tol: float = 1e-13) -> CharacteristicsReport:
    """Sup-norms of grad_v^k Y, grad_v^k W and grad_x Y per s for each final time."""
    d = E.dimension
    points = phase_points(d) if points is None else points
    rows, rY, rW, rX, its = [], {}, {}, {}, {}
    for t in t_values:
        s = np.linspace(0.0, t, n_s)
        sol = picard_solve_characteristics(E, t, points, tol, s)
        its[float(t)] = sol.iterations
        st = differentiate_characteristics(sol, k_max, h)
        gx = st.sup_grad_x()
        env = None if not eps else eps * np.log(2.0 + s)
        for k in range(k_max + 1):
            sy, sw = st.sup("Y", k), st.sup("W", k)
            for i in range(n_s):
                rows.append((float(t), float(s[i]), k, float(sy[i]), float(sw[i]), float(gx[i])))
            if env is not None:
                rY[(float(t), k)] = sy * (1 + s) ** (d - 2) / env
                rW[(float(t), k)] = sw * (1 + s) ** (d - 1) / env
        if env is not None:
            rX[(float(t), 1)] = gx * (1 + s) ** (d - 1) / env
    return CharacteristicsReport(eps or 0.0, d, rows, rY, rW, rX, its)
