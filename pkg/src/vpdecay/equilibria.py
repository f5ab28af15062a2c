"""Homogeneous background equilibria mu(v) with closed-form Fourier data.

Two families are supported: the Maxwellian of velocity scale ``sigma`` and
the symmetric double bump, the equal-weight mixture of two Maxwellians
centred at ``+-u e_1``.  Both have explicit transforms

    mu_hat(eta) = cos(u eta_1) exp(-sigma^2 |eta|^2 / 2)

(``u = 0`` for the Maxwellian), which is what makes exact oracles possible
downstream.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np
from numpy.polynomial import hermite_e
from scipy import optimize

from .errors import CapabilityError, ParameterError

FAMILIES = ("maxwellian", "double_bump")


def multi_indices(m: int, d: int) -> list[tuple[int, ...]]:
    """All multi-indices alpha in N^d with |alpha| = m."""
    out = []
    for combo in itertools.combinations_with_replacement(range(d), m):
        alpha = [0] * d
        for i in combo:
            alpha[i] += 1
        out.append(tuple(alpha))
    return out


def multinomial(alpha) -> int:
    """Number of ordered index tuples that collapse to ``alpha``."""
    out = math.factorial(sum(alpha))
    for a in alpha:
        out //= math.factorial(a)
    return out


def japanese(v):
    """<v> = sqrt(1 + |v|^2) along the last axis."""
    v = np.asarray(v, dtype=float)
    return np.sqrt(1.0 + np.sum(v * v, axis=-1))


def _gauss_derivative(x, n, sigma):
    """n-th derivative of the normalised 1-D Gaussian of scale sigma."""
    z = x / sigma
    coef = np.zeros(n + 1)
    coef[n] = 1.0
    base = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi * sigma * sigma)
    return (-1.0 / sigma) ** n * hermite_e.hermeval(z, coef) * base


@dataclass(frozen=True)
class Equilibrium:
    """Immutable background distribution.

    ``decay_constants`` maps ``(m, M)`` to ``C_{m,M}``, an upper bound of
    ``|grad^m mu(v)| <v>^M`` (Frobenius norm of the derivative tensor).
    They are computed lazily on first access.
    """

    dimension: int
    family: str
    sigma: float = 1.0
    u: float = 0.0
    max_order: int = 4
    decay_exponents: tuple = ()

    def __post_init__(self):
        if self.dimension < 1:
            raise ParameterError(f"dimension must be >= 1, got {self.dimension}", "equilibria")
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown family {self.family!r}", "equilibria")
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}", "equilibria")
        if self.u < 0:
            raise ParameterError(f"separation u must be >= 0, got {self.u}", "equilibria")
        if self.family == "maxwellian" and self.u != 0:
            raise ParameterError("maxwellian takes no separation u", "equilibria")
        if not self.decay_exponents:
            d = self.dimension
            object.__setattr__(self, "decay_exponents", (2.0, float(d + 1), float(d + 3)))

    @property
    def normalization(self) -> float:
        return (2.0 * math.pi * self.sigma**2) ** (-0.5 * self.dimension)

    @property
    def is_isotropic(self) -> bool:
        return self.u == 0.0

    @property
    def velocity_box(self) -> float:
        """Half-width L_v with Gaussian tail mass below 1e-12."""
        return self.u + 8.0 * self.sigma

    def _axis_profiles(self, v, n_by_axis):
        """Product of per-axis derivative profiles; axis 0 carries the shift."""
        v = np.asarray(v, dtype=float)
        out = np.ones(v.shape[:-1])
        for i, n in enumerate(n_by_axis):
            x = v[..., i]
            if i == 0 and self.u != 0.0:
                prof = 0.5 * (_gauss_derivative(x - self.u, n, self.sigma)
                              + _gauss_derivative(x + self.u, n, self.sigma))
            else:
                prof = _gauss_derivative(x, n, self.sigma)
            out = out * prof
        return out

    def __call__(self, v):
        """mu(v); ``v`` has shape (..., d)."""
        return self._axis_profiles(v, (0,) * self.dimension)

    def partial(self, v, alpha):
        """The partial derivative d^alpha mu at ``v``."""
        if len(alpha) != self.dimension:
            raise ParameterError("multi-index length must equal dimension", "equilibria")
        return self._axis_profiles(v, alpha)

    def gradient(self, v):
        """grad_v mu, shape (..., d)."""
        d = self.dimension
        cols = []
        for i in range(d):
            alpha = [0] * d
            alpha[i] = 1
            cols.append(self._axis_profiles(v, alpha))
        return np.stack(cols, axis=-1)

    def derivative_norm(self, v, m: int):
        """Pointwise Frobenius norm |grad^m mu(v)|."""
        if m > self.max_order:
            raise CapabilityError(
                f"derivative order {m} exceeds stored order {self.max_order}", "equilibria")
        if m == 0:
            return np.abs(self(v))
        acc = 0.0
        for alpha in multi_indices(m, self.dimension):
            acc = acc + multinomial(alpha) * self._axis_profiles(v, alpha) ** 2
        return np.sqrt(acc)

    def mu_hat(self, eta):
        """Fourier transform int mu(v) exp(-i v.eta) dv."""
        eta = np.asarray(eta, dtype=float)
        r2 = np.sum(eta * eta, axis=-1)
        out = np.exp(-0.5 * self.sigma**2 * r2)
        if self.u != 0.0:
            out = out * np.cos(self.u * eta[..., 0])
        return out

    def radial_hat_taylor(self, direction, order: int):
        """Taylor coefficients in t of mu_hat(t r omega) divided by powers of r.

        Returns c_n such that mu_hat(t xi) = sum_n c_n(xi) t^n, evaluated for
        ``xi = direction`` (any vector).  Used for endpoint corrections.
        """
        xi = np.asarray(direction, dtype=float)
        a2 = self.sigma**2 * float(xi @ xi)
        b = self.u * float(xi[0])
        gauss = np.zeros(order + 1)
        for k in range(order // 2 + 1):
            gauss[2 * k] = (-0.5 * a2) ** k / math.factorial(k)
        cosine = np.zeros(order + 1)
        for k in range(order // 2 + 1):
            cosine[2 * k] = (-1) ** k * b ** (2 * k) / math.factorial(2 * k)
        return np.convolve(gauss, cosine)[: order + 1]

    @cached_property
    def decay_constants(self) -> Mapping[tuple, float]:
        return {
            (m, M): _sup_weighted_derivative(self, m, M) * (1.0 + 1e-6)
            for m in range(self.max_order + 1)
            for M in self.decay_exponents
        }

    def velocity_quadrature(self, n: int = 64):
        """Tensor trapezoid nodes and weights on [-L_v, L_v]^d."""
        L = self.velocity_box
        x = np.linspace(-L, L, n)
        h = x[1] - x[0]
        w1 = np.full(n, h)
        w1[[0, -1]] *= 0.5
        grids = np.meshgrid(*([x] * self.dimension), indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=-1)
        weights = np.ones(1)
        for _ in range(self.dimension):
            weights = np.multiply.outer(weights, w1)
        return nodes, weights.ravel()

    def mass(self, n: int = 64) -> float:
        nodes, weights = self.velocity_quadrature(n)
        return float(weights @ self(nodes))

    def to_config(self) -> str:
        lines = [f"family = {self.family}", f"d = {self.dimension}", f"sigma = {self.sigma!r}"]
        if self.family == "double_bump":
            lines.append(f"u = {self.u!r}")
        return "\n".join(lines) + "\n"


def _sup_weighted_derivative(eq: Equilibrium, m: int, M: float) -> float:
    """sup_v |grad^m mu(v)| <v>^M by grid search plus local polishing."""
    d = eq.dimension
    L = eq.u + eq.sigma * (4.0 + 2.0 * math.sqrt(M + m + 1.0)) + 1.0
    n = 61 if d <= 3 else 21
    axis = np.linspace(-L, L, n)
    mesh = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)

    def objective(v):
        return eq.derivative_norm(v, m) * japanese(v) ** M

    vals = objective(mesh)
    best = float(vals.max())
    for idx in np.argsort(vals)[-3:]:
        res = optimize.minimize(lambda v: -float(objective(v)), mesh[idx], method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
        best = max(best, -float(res.fun))
    return best


def make_equilibrium(spec: Mapping | str = "maxwellian", d: int = 3, *, sigma=None, u=None,
                     max_order: int = 4, decay_exponents=()) -> Equilibrium:
    """Build an equilibrium from a family spec.

    ``spec`` is either a family name or a mapping with keys ``family``,
    ``sigma`` and (for the double bump) ``u``.
    """
    if isinstance(spec, str):
        spec = {"family": spec}
    spec = dict(spec)
    family = spec.get("family", "maxwellian")
    sig = float(spec.get("sigma", 1.0) if sigma is None else sigma)
    sep = float(spec.get("u", 0.0) if u is None else u)
    if not sig > 0:
        raise ParameterError(f"sigma must be positive, got {sig}", "equilibria")
    return Equilibrium(dimension=int(d), family=family, sigma=sig, u=sep,
                       max_order=max_order, decay_exponents=tuple(decay_exponents))


def mu_fourier_gradient(eq: Equilibrium, eta):
    """Transform of grad_v mu: i eta mu_hat(eta), shape (..., d), complex."""
    eta = np.asarray(eta, dtype=float)
    return 1j * eta * eq.mu_hat(eta)[..., None]


@dataclass
class DecayBoundCheck:
    holds: bool
    worst_constant: float
    argmax: np.ndarray | None = field(default=None, repr=False)


def verify_decay_bound(eq: Equilibrium, m: int, M: float, samples) -> DecayBoundCheck:
    """Compare max |grad^m mu| <v>^M over ``samples`` with the stored C_{m,M}."""
    if m > eq.max_order:
        raise CapabilityError(f"no evaluator for derivative order {m}", "equilibria")
    samples = np.asarray(samples, dtype=float).reshape(-1, eq.dimension)
    if samples.shape[0] == 0:
        return DecayBoundCheck(True, 0.0, None)
    vals = eq.derivative_norm(samples, m) * japanese(samples) ** M
    i = int(np.argmax(vals))
    worst = float(vals[i])
    key = (m, float(M))
    stored = eq.decay_constants.get(key)
    if stored is None:
        stored = _sup_weighted_derivative(eq, m, M) * (1.0 + 1e-6)
    return DecayBoundCheck(worst <= stored, worst, samples[i])
