"""Spatial grids with a matching spectral side.

Two layouts share one interface:

* ``CartesianGrid``: n^d points centred on the origin, FFT spectral side.
* ``RadialGrid``: radial profiles in d = 3 on r_j = j dr, with the
  sine-transform (DST-I) pair as spectral side.  It is exact for radial
  functions and far cheaper, so it is used wherever isotropy holds.

Transforms follow ``F(xi) = int f(x) exp(-i x.xi) dx``.  Derivative norms
are Frobenius norms of the full tensor grad^k f, pointwise, then L^1 / L^inf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import fft as sfft

from .equilibria import multi_indices, multinomial
from .errors import ParameterError


@dataclass(frozen=True)
class CartesianGrid:
    n: int
    side: float
    dimension: int = 3

    def __post_init__(self):
        if self.n < 2 or self.side <= 0 or self.dimension < 1:
            raise ParameterError("grid needs n >= 2, side > 0, d >= 1", "grids")

    @property
    def dx(self) -> float:
        return self.side / self.n

    @property
    def cell_volume(self) -> float:
        return self.dx ** self.dimension

    @property
    def shape(self):
        return (self.n,) * self.dimension

    @cached_property
    def axis(self):
        return (np.arange(self.n) - self.n // 2) * self.dx

    @cached_property
    def points(self):
        """Physical nodes, shape (n,)*d + (d,)."""
        mesh = np.meshgrid(*([self.axis] * self.dimension), indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def xi_axes(self):
        k = 2.0 * math.pi * sfft.fftfreq(self.n, d=self.dx)
        out = []
        for i in range(self.dimension):
            shape = [1] * self.dimension
            shape[i] = self.n
            out.append(k.reshape(shape))
        return out

    @cached_property
    def xi_norm(self):
        return np.sqrt(sum(k * k for k in self.xi_axes))

    @property
    def nyquist(self) -> float:
        return math.pi / self.dx

    def to_spectral(self, f):
        axes = tuple(range(-self.dimension, 0))
        return self.cell_volume * sfft.fftn(sfft.ifftshift(f, axes=axes), axes=axes)

    def to_physical(self, F, real=True):
        axes = tuple(range(-self.dimension, 0))
        f = sfft.fftshift(sfft.ifftn(F, axes=axes), axes=axes) / self.cell_volume
        return f.real if real else f

    def multiplier(self, alpha):
        """(i xi)^alpha on the spectral lattice."""
        out = 1.0 + 0j
        for k, a in zip(self.xi_axes, alpha):
            if a:
                out = out * (1j * k) ** a
        return out

    def derivative_fields(self, F, k: int):
        """Pointwise |grad^k f| from spectral data F (Frobenius norm)."""
        if k == 0:
            return np.abs(self.to_physical(F))
        acc = 0.0
        for alpha in multi_indices(k, self.dimension):
            acc = acc + multinomial(alpha) * self.to_physical(self.multiplier(alpha) * F) ** 2
        return np.sqrt(acc)

    def derivative_norms(self, F, k_max: int):
        """[(L1, Linf)] of grad^k f for k = 0..k_max."""
        out = []
        for k in range(k_max + 1):
            g = self.derivative_fields(F, k)
            out.append((float(np.sum(g) * self.cell_volume), float(np.max(g))))
        return out

    def spectral_l2(self, F) -> float:
        """||f||_{L^2} from spectral data via Parseval."""
        dxi = (2.0 * math.pi / self.side) ** self.dimension
        return math.sqrt(float(np.sum(np.abs(F) ** 2)) * dxi / (2.0 * math.pi) ** self.dimension)

    def radial_values(self, profile, r=None):
        """Evaluate a callable profile(|x|) on the physical nodes."""
        r = np.sqrt(np.sum(self.points**2, axis=-1)) if r is None else r
        return profile(r)


@dataclass(frozen=True)
class RadialGrid:
    """Radial functions in R^3 sampled at r_j = j dr, j = 1..n."""

    n: int
    dr: float
    dimension: int = 3

    def __post_init__(self):
        if self.dimension != 3:
            raise ParameterError("radial grid supports d = 3 only", "grids")
        if self.n < 2 or self.dr <= 0:
            raise ParameterError("radial grid needs n >= 2, dr > 0", "grids")

    @classmethod
    def covering(cls, radius: float, k_max: float):
        """Smallest grid reaching ``radius`` whose top frequency is >= ``k_max``."""
        dr = min(math.pi / k_max, radius / 8.0)
        return cls(int(math.ceil(radius / dr)), dr)

    @property
    def radius(self) -> float:
        return (self.n + 1) * self.dr

    @cached_property
    def r(self):
        return self.dr * np.arange(1, self.n + 1)

    @property
    def dk(self) -> float:
        return math.pi / self.radius

    @cached_property
    def k(self):
        return self.dk * np.arange(1, self.n + 1)

    @property
    def xi_norm(self):
        return self.k

    @property
    def nyquist(self) -> float:
        return float(self.k[-1])

    @cached_property
    def shell(self):
        """Quadrature weights 4 pi r^2 dr."""
        return 4.0 * math.pi * self.r**2 * self.dr

    def to_spectral(self, f):
        # F(k) = (4 pi / k) int f(r) r sin(k r) dr
        g = sfft.dst(np.asarray(f) * self.r, type=1, axis=-1)
        return 2.0 * math.pi * self.dr * g / self.k

    def to_physical(self, F, real=True):
        # f(r) = (1 / (2 pi^2 r)) int F(k) k sin(k r) dk
        F = np.asarray(F)
        g = sfft.dst(F * self.k, type=1, axis=-1)
        f = self.dk * g / (4.0 * math.pi**2 * self.r)
        return f.real if (real and np.iscomplexobj(f)) else f

    def _cos_sum(self, c):
        pad = np.zeros(c.shape[:-1] + (self.n + 2,), dtype=c.dtype)
        pad[..., 1:-1] = c
        return 0.5 * sfft.dct(pad, type=1, axis=-1)[..., 1:-1]

    def profile_derivatives(self, F):
        """(f, f', f'') on r plus their values at r = 0."""
        F = np.real(np.asarray(F))
        c = self.dk * self.k * F / (2.0 * math.pi**2)
        r = self.r
        s = 0.5 * sfft.dst(c, type=1, axis=-1)          # sum c sin(k r)
        kc = self._cos_sum(c * self.k)                 # sum c k cos(k r)
        k2s = 0.5 * sfft.dst(c * self.k**2, type=1, axis=-1)
        f = s / r
        f1 = kc / r - s / r**2
        f2 = -k2s / r - 2.0 * kc / r**2 + 2.0 * s / r**3
        f0 = np.sum(c * self.k, axis=-1)
        f2_0 = -np.sum(c * self.k**3, axis=-1) / 3.0
        return f, f1, f2, f0, f2_0

    def derivative_fields(self, F, k: int):
        """|grad^k f| on r_j and at the origin (k <= 2)."""
        if k > 2:
            raise ParameterError("radial grid resolves derivative order <= 2", "grids")
        f, f1, f2, f0, f2_0 = self.profile_derivatives(F)
        if k == 0:
            return np.abs(f), np.abs(f0)
        if k == 1:
            return np.abs(f1), np.zeros_like(f0)
        return np.sqrt(f2**2 + 2.0 * (f1 / self.r) ** 2), math.sqrt(3.0) * np.abs(f2_0)

    def derivative_norms(self, F, k_max: int):
        out = []
        for k in range(k_max + 1):
            g, g0 = self.derivative_fields(F, k)
            out.append((float(g @ self.shell), float(max(np.max(g), np.max(g0)))))
        return out

    def spectral_l2(self, F) -> float:
        F = np.asarray(F)
        return math.sqrt(float(np.sum(np.abs(F) ** 2 * 4.0 * math.pi * self.k**2)) * self.dk
                         / (2.0 * math.pi) ** 3)

    def radial_values(self, profile, r=None):
        return profile(self.r if r is None else r)


def radial_inverse_transform(F_of_k, rho, k_max: float, n_k: int = 4000):
    """f(rho) for radial spectral data given as a callable of |xi|, d = 3.

    Plain trapezoid on [0, k_max]; meant for oracles and spot values.
    """
    k = np.linspace(0.0, k_max, n_k + 1)
    w = np.full(k.size, k[1] - k[0])
    w[[0, -1]] *= 0.5
    vals = F_of_k(k) * k * w
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    out = np.empty(rho.shape)
    small = rho < 1e-12
    out[small] = np.sum(vals * k) / (2.0 * math.pi**2)
    rr = rho[~small]
    out[~small] = (np.sin(np.outer(rr, k)) @ vals) / (2.0 * math.pi**2 * rr)
    return out
