"""Free-transport density and its decay.

rho_free(t, x) = int f0(x - t v, v) dv = t^{-d} int f0(w, (x - w)/t) dw.

Built-in data are per-axis products f0 = A * prod a(x_i) * prod b(v_i), with
a, b either Gaussians or the compact mollifier exp(-1/(1-s^2)).  For those
the density factorises into 1-D convolutions, evaluated with the w-form for
t > 1 and the v-form for t <= 1 (whichever integrand is wider sets the
nodes).  Generic callables go through a d-dimensional tensor trapezoid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial
from scipy.special import erfc

from .equilibria import _gauss_derivative, multi_indices, multinomial
from .errors import DomainError, ParameterError
from .fitting import DecayReport


class QuadratureWarning(UserWarning):
    pass


def _bump_polys(n_max):
    """p_n with d^n/ds^n exp(-1/(1-s^2)) = p_n(s) (1-s^2)^(-2n) exp(-1/(1-s^2))."""
    q = Polynomial([1.0, 0.0, -1.0])
    s = Polynomial([0.0, 1.0])
    polys = [Polynomial([1.0])]
    for n in range(n_max):
        p = polys[-1]
        polys.append(p.deriv() * q * q + 4 * n * s * p * q - 2 * s * p)
    return polys


_BUMP_POLYS = _bump_polys(8)


@dataclass(frozen=True)
class Profile1D:
    """A 1-D factor: ``gaussian`` (normalised, scale) or ``bump`` (support radius = scale)."""

    kind: str
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "bump"):
            raise ParameterError(f"unknown profile {self.kind!r}", "transport")
        if not self.scale > 0:
            raise ParameterError("profile scale must be positive", "transport")

    @property
    def half_width(self) -> float:
        return 8.0 * self.scale if self.kind == "gaussian" else self.scale

    @property
    def resolution(self) -> float:
        """Length over which the profile varies appreciably."""
        return self.scale if self.kind == "gaussian" else 0.25 * self.scale

    def tail_mass(self, half_width: float) -> float:
        if self.kind == "bump":
            return 0.0 if half_width >= self.scale else 1.0
        return float(erfc(half_width / (math.sqrt(2.0) * self.scale)))

    def deriv(self, x, n: int = 0):
        x = np.asarray(x, dtype=float)
        if self.kind == "gaussian":
            return _gauss_derivative(x, n, self.scale)
        if n >= len(_BUMP_POLYS):
            raise ParameterError("bump derivatives available to order 8", "transport")
        s = x / self.scale
        out = np.zeros(s.shape)
        inside = np.abs(s) < 1.0
        si = s[inside]
        q = 1.0 - si * si
        out[inside] = _BUMP_POLYS[n](si) * q ** (-2 * n) * np.exp(-1.0 / q)
        return out / self.scale**n

    def __call__(self, x):
        return self.deriv(x, 0)

    @cached_property
    def mass(self) -> float:
        if self.kind == "gaussian":
            return 1.0
        x = np.linspace(-self.scale, self.scale, 4001)
        return float(np.trapezoid(self(x), x))


@dataclass(frozen=True)
class InitialDatum:
    """f0(x, v) = amplitude * prod_i a(x_i) * prod_i b(v_i), or a generic callable."""

    dimension: int
    x_profile: Profile1D | None = None
    v_profile: Profile1D | None = None
    amplitude: float = 1.0
    func: Callable | None = None
    x_scale: float = 1.0
    v_scale: float = 1.0

    @property
    def separable(self) -> bool:
        return self.func is None

    @property
    def is_zero(self) -> bool:
        return self.separable and self.amplitude == 0.0

    def __call__(self, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        if not self.separable:
            return self.func(x, v)
        return self.amplitude * self.x_factor(x) * self.v_factor(v)

    def x_factor(self, x, alpha=None):
        alpha = (0,) * self.dimension if alpha is None else alpha
        out = 1.0
        for i, n in enumerate(alpha):
            out = out * self.x_profile.deriv(x[..., i], n)
        return out

    def v_factor(self, v, alpha=None):
        alpha = (0,) * self.dimension if alpha is None else alpha
        out = 1.0
        for i, n in enumerate(alpha):
            out = out * self.v_profile.deriv(v[..., i], n)
        return out

    def grad_x(self, x, v):
        d = self.dimension
        cols = [self.x_factor(x, tuple(int(j == i) for j in range(d))) for i in range(d)]
        return self.amplitude * np.stack(cols, -1) * self.v_factor(v)[..., None]

    def grad_v(self, x, v):
        d = self.dimension
        cols = [self.v_factor(v, tuple(int(j == i) for j in range(d))) for i in range(d)]
        return self.amplitude * np.stack(cols, -1) * self.x_factor(x)[..., None]

    def partial(self, x, v, alpha_x, alpha_v):
        return self.amplitude * self.x_factor(x, alpha_x) * self.v_factor(v, alpha_v)

    def hessian_blocks(self, x, v):
        """(f_xx, f_xv, f_vv) second-derivative blocks, each (..., d, d)."""
        d = self.dimension
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        zero = (0,) * d

        def unit(*idx):
            a = [0] * d
            for i in idx:
                a[i] += 1
            return tuple(a)

        xx = np.empty(x.shape[:-1] + (d, d))
        xv = np.empty_like(xx)
        vv = np.empty_like(xx)
        for i in range(d):
            for j in range(d):
                xx[..., i, j] = self.partial(x, v, unit(i, j), zero)
                xv[..., i, j] = self.partial(x, v, unit(i), unit(j))
                vv[..., i, j] = self.partial(x, v, zero, unit(i, j))
        return xx, xv, vv

    def _factor_norms(self, profile, k, n=65):
        """(L1, sup) of |grad^k prod p(z_i)| over R^d by tensor trapezoid."""
        d = self.dimension
        L = profile.half_width
        z = np.linspace(-L, L, n)
        w1 = np.full(n, z[1] - z[0])
        w1[[0, -1]] *= 0.5
        der = [profile.deriv(z, m) for m in range(k + 1)]
        acc = 0.0
        for alpha in multi_indices(k, d):
            term = 1.0
            for i, m in enumerate(alpha):
                shape = [1] * d
                shape[i] = n
                term = term * der[m].reshape(shape)
            acc = acc + multinomial(alpha) * term**2
        g = np.sqrt(acc) * np.ones((n,) * d)
        weights = 1.0
        for i in range(d):
            shape = [1] * d
            shape[i] = n
            weights = weights * w1.reshape(shape)
        return float(np.sum(g * weights)), float(np.max(g))

    def ledger(self, N: int = 2) -> dict:
        """Norms of grad^k_{x,v} f0 for k <= N.

        Keys ``("L1", k)`` and ``("L1Linf", k)``.  Mixed-derivative entries are
        upper bounds (triangle inequality over the split of k between x and
        v); pure-v entries ``("L1Linf_v", k)`` are exact.
        """
        if not self.separable:
            raise ParameterError("ledger needs a separable datum", "transport")
        A = abs(self.amplitude)
        xn = [self._factor_norms(self.x_profile, j) for j in range(N + 1)]
        vn = [self._factor_norms(self.v_profile, j) for j in range(N + 1)]
        out = {}
        for k in range(N + 1):
            out[("L1", k)] = A * sum(math.sqrt(math.comb(k, j)) * xn[j][0] * vn[k - j][0]
                                     for j in range(k + 1))
            out[("L1Linf", k)] = A * sum(math.sqrt(math.comb(k, j)) * xn[j][0] * vn[k - j][1]
                                         for j in range(k + 1))
            out[("L1Linf_v", k)] = A * xn[0][0] * vn[k][1]
        return out

    def epsilon(self, N: int = 2) -> float:
        led = self.ledger(N)
        return max(v for (kind, _), v in led.items() if kind in ("L1", "L1Linf"))

    def scaled(self, factor: float) -> "InitialDatum":
        if not self.separable:
            func = self.func
            return InitialDatum(self.dimension, func=lambda x, v: factor * func(x, v),
                                x_scale=self.x_scale, v_scale=self.v_scale)
        return InitialDatum(self.dimension, self.x_profile, self.v_profile,
                            self.amplitude * factor)


def make_initial_datum(kind: str = "gaussian", d: int = 3, *, sigma_x: float = 1.0,
                       sigma_v: float = 1.0, amplitude: float = 1.0) -> InitialDatum:
    """Separable datum; for ``bump`` the sigmas are support radii."""
    if d < 1:
        raise ParameterError("dimension must be >= 1", "transport")
    if kind not in ("gaussian", "bump", "zero"):
        raise ParameterError(f"unknown datum {kind!r}", "transport")
    if kind == "zero":
        return InitialDatum(d, Profile1D("gaussian", sigma_x), Profile1D("gaussian", sigma_v), 0.0)
    return InitialDatum(d, Profile1D(kind, sigma_x), Profile1D(kind, sigma_v), float(amplitude))


def _trap_nodes(center, half_width, step):
    n = max(int(math.ceil(2.0 * half_width / step)), 8) + 1
    z = np.linspace(center - half_width, center + half_width, n)
    w = np.full(n, z[1] - z[0])
    w[[0, -1]] *= 0.5
    return z, w


def free_factor(f0: InitialDatum, t: float, x, n: int = 0, nodes: int | None = None):
    """1-D factor d^n/dx^n int a(x - t v) b(v) dv (per-axis piece of rho_free)."""
    a, b = f0.x_profile, f0.v_profile
    x = np.asarray(x, dtype=float)
    if t < 0:
        raise DomainError("time must be >= 0", "transport")
    if t == 0.0:
        # int a(x) b(v) dv = a(x) * mass(b)
        return a.deriv(x, n) * b.mass
    if t > 1.0:
        # w-form: t^{-1-n} int a(w) b^(n)((x - w)/t) dw
        step = min(a.resolution, t * b.resolution) / 16.0
        z, w = _trap_nodes(0.0, a.half_width, step)
        kern = b.deriv((x[..., None] - z) / t, n)
        return (kern * (a(z) * w)).sum(-1) / t ** (1 + n)
    # v-form: int a^(n)(x - t v) b(v) dv
    step = min(b.resolution, a.resolution / t) / 16.0
    z, w = _trap_nodes(0.0, b.half_width, step)
    kern = a.deriv(x[..., None] - t * z, n)
    return (kern * (b(z) * w)).sum(-1)


def _points(x_grid, d):
    if hasattr(x_grid, "points"):
        return x_grid.points
    x = np.asarray(x_grid, dtype=float)
    if x.shape[-1] != d:
        raise DomainError(f"points must have trailing dimension {d}", "transport")
    return x


def free_density(f0: InitialDatum, t: float, x_grid, alpha=None, *, n_quad: int = 24,
                 box: float = 8.0):
    """d^alpha_x rho_free(t, x) on the given points (shape (..., d) or a grid)."""
    d = f0.dimension
    x = _points(x_grid, d)
    alpha = (0,) * d if alpha is None else tuple(alpha)
    if t < 0:
        raise DomainError("time must be >= 0", "transport")
    if f0.separable:
        out = f0.amplitude * np.ones(x.shape[:-1])
        for i, n in enumerate(alpha):
            out = out * free_factor(f0, t, x[..., i], n)
        return out
    if any(alpha):
        raise ParameterError("generic data support alpha = 0 only", "transport")
    # generic datum: tensor trapezoid in v (t <= 1) or in w (t > 1)
    if t <= 1.0:
        z, w1 = _trap_nodes(0.0, box * f0.v_scale, f0.v_scale / 4.0)
    else:
        z, w1 = _trap_nodes(0.0, box * f0.x_scale, f0.x_scale / 4.0)
    grids = np.meshgrid(*([z] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], -1)
    weights = np.ones(1)
    for _ in range(d):
        weights = np.multiply.outer(weights, w1).ravel()
    flat = x.reshape(-1, d)
    out = np.empty(flat.shape[0])
    for i, xi in enumerate(flat):
        if t <= 1.0:
            vals = f0(xi - t * nodes, nodes)
        else:
            vals = f0(nodes, (xi - nodes) / t) / t**d
        out[i] = vals @ weights
    lost = 1.0 - math.erf(box / math.sqrt(2.0)) ** d
    if lost > 1e-8:
        warnings.warn(f"quadrature box may lose mass {lost:.1e}", QuadratureWarning)
    return out.reshape(x.shape[:-1])


def gaussian_free_oracle(t, x, sigma_x=1.0, sigma_v=1.0, amplitude=1.0):
    """Closed form for Gaussian data: normal density of variance sigma_x^2 + t^2 sigma_v^2."""
    x = np.asarray(x, dtype=float)
    s2 = sigma_x**2 + (t * sigma_v) ** 2
    d = x.shape[-1]
    return amplitude * np.exp(-0.5 * np.sum(x * x, -1) / s2) / (2.0 * math.pi * s2) ** (d / 2)


def free_axis(f0: InitialDatum, t: float, n: int = 97):
    """Symmetric 1-D axis covering the support of rho_free(t)."""
    a, b = f0.x_profile, f0.v_profile
    if a.kind == "gaussian" and b.kind == "gaussian":
        L = 8.0 * math.hypot(a.scale, t * b.scale)
    else:
        L = a.half_width + t * b.half_width
    return np.linspace(-L, L, n)


def free_derivative_norms(f0: InitialDatum, t: float, k_max: int, n: int = 97):
    """[(L1, Linf)] of |grad_x^k rho_free(t)| for k <= k_max (separable data)."""
    d = f0.dimension
    z = free_axis(f0, t, n)
    w1 = np.full(n, z[1] - z[0])
    w1[[0, -1]] *= 0.5
    der = [free_factor(f0, t, z, m) for m in range(k_max + 1)]
    weights = 1.0
    for i in range(d):
        shape = [1] * d
        shape[i] = n
        weights = weights * w1.reshape(shape)
    out = []
    for k in range(k_max + 1):
        acc = 0.0
        for alpha in multi_indices(k, d):
            term = 1.0
            for i, m in enumerate(alpha):
                shape = [1] * d
                shape[i] = n
                term = term * der[m].reshape(shape)
            acc = acc + multinomial(alpha) * term**2
        g = abs(f0.amplitude) * np.sqrt(acc) * np.ones((n,) * d)
        out.append((float(np.sum(g * weights)), float(np.max(g))))
    return out


def free_decay_report(f0: InitialDatum, k_max: int, t_samples, window=None) -> DecayReport:
    """Series ``L1_k{k}`` and ``Linf_k{k}`` with fitted power laws."""
    if not f0.separable:
        raise ParameterError("decay report needs a separable datum", "transport")
    t_samples = np.asarray(t_samples, dtype=float)
    vals = np.array([free_derivative_norms(f0, float(t), k_max) for t in t_samples])
    rep = DecayReport(t_samples)
    if window is None:
        window = (float(t_samples.min()), float(t_samples.max()))
    for k in range(k_max + 1):
        rep.add(f"L1_k{k}", vals[:, k, 0], window)
        rep.add(f"Linf_k{k}", vals[:, k, 1], window)
    return rep
