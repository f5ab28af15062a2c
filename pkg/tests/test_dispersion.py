import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import wofz

from vpdecay.dispersion import (dispersion_transform, mode_kernel, penrose_margin, tail_bound,
                                winding_number)
from vpdecay.equilibria import make_equilibrium
from vpdecay.errors import DomainError, PrecisionError


def maxwell_oracle(tau, r, sigma=1.0):
    """Closed form of int_0^inf exp(-i tau t) K(t, r e_1) dt via the Faddeeva function."""
    a = sigma * r
    c = r * r / (1 + r * r)
    z = tau / (math.sqrt(2) * a)
    return -c * (1 - 1j * math.sqrt(math.pi) * z * wofz(-z)) / a**2


@given(st.floats(-6, 6), st.floats(-3, 0), st.floats(0.05, 6), st.floats(0.5, 2))
def test_transform_matches_faddeeva(re, im, r, sigma):
    eq = make_equilibrium("maxwellian", 3, sigma=sigma)
    tau = complex(re, im)
    assert dispersion_transform(eq, tau, r) == pytest.approx(maxwell_oracle(tau, r, sigma),
                                                             abs=1e-9)


@given(st.floats(-4, 4), st.floats(-1, 0), st.floats(0.1, 4), st.floats(0, 3))
def test_double_bump_is_average_of_shifted_maxwellians(re, im, r, u):
    # cos(u r t) splits into two frequency shifts of the Maxwellian transform
    eq = make_equilibrium("double_bump", 3, u=u)
    tau = complex(re, im)
    expect = 0.5 * (maxwell_oracle(tau - u * r, r) + maxwell_oracle(tau + u * r, r))
    assert dispersion_transform(eq, tau, r) == pytest.approx(expect, abs=1e-9)


def test_zero_frequency_vanishes(maxwellian):
    assert dispersion_transform(maxwellian, 0.3, 0.0) == 0
    assert np.all(mode_kernel(maxwellian, np.linspace(0, 3, 7), 0.0) == 0)


def test_mode_kernel_closed_form(maxwellian):
    t = np.linspace(0, 4, 9)
    r = 1.7
    expect = -(r * r / (1 + r * r)) * t * np.exp(-0.5 * (r * t) ** 2)
    assert np.allclose(mode_kernel(maxwellian, t, r), expect, atol=1e-15)


def test_upper_half_plane_rejected(maxwellian):
    with pytest.raises(DomainError):
        dispersion_transform(maxwellian, 1 + 0.1j, 1.0)


def test_tail_bound_dominates_true_tail(maxwellian):
    from scipy import integrate
    r, cut = 0.8, 3.0
    true, _ = integrate.quad(lambda t: abs(mode_kernel(maxwellian, t, r)), cut, np.inf)
    assert tail_bound(maxwellian, r, cut) >= true
    _, tail = dispersion_transform(maxwellian, 0.0, r, return_tail=True)
    assert tail < 1e-15


def test_winding_numbers():
    theta = np.linspace(0, 2 * math.pi, 200, endpoint=False)
    circle = np.exp(1j * theta)
    assert winding_number(circle) == 1
    assert winding_number(circle[::-1]) == -1
    assert winding_number(3 + circle) == 0
    assert winding_number(np.exp(2j * theta)) == 2
    with pytest.raises(PrecisionError):
        winding_number(np.exp(1j * theta[::67]))


def test_penrose_small_grid_matches_oracle_minimum(maxwellian):
    r_grid = np.array([0.25, 0.5, 1.0, 2.0])
    tau_grid = np.linspace(-10, 10, 401)
    rep = penrose_margin(maxwellian, r_grid, tau_grid, (0.0, -0.5), keep_rows=True)
    grid_min = min(abs(1 - maxwell_oracle(t + 1j * d, r))
                   for r in r_grid for t in tau_grid for d in (0.0, -0.5))
    assert rep.stable
    assert set(rep.winding_counts.values()) == {0}
    # the arc only adds points where K is small, so the real/depth rows set the margin
    assert rep.margin == pytest.approx(min(grid_min, 1.0), rel=1e-9)
    assert len(rep.rows) == 2 * r_grid.size * tau_grid.size


def test_double_bump_margin_is_not_monotone_in_u():
    # margins at u = 0, 1, 2, 4 on a common grid: 1 -> 2 decreases, 2 -> 4 increases
    r_grid = 2.0 ** np.linspace(-3, 3, 25)
    tau_grid = np.linspace(-12, 12, 961)
    margins = {}
    for u in (0.0, 1.0, 2.0, 4.0):
        fam = "maxwellian" if u == 0 else "double_bump"
        margins[u] = penrose_margin(make_equilibrium(fam, 3, u=u), r_grid, tau_grid,
                                    (0.0,)).margin
    assert margins[1.0] > margins[0.0]
    assert margins[2.0] < margins[1.0]
    assert margins[4.0] > margins[2.0]


@pytest.mark.parametrize("kwargs", [dict(r_grid=np.array([0.0, 1.0])),
                                    dict(im_depths=(0.1,)),
                                    dict(tau_grid=np.array([]))])
def test_penrose_rejects_bad_grids(maxwellian, kwargs):
    with pytest.raises(DomainError):
        penrose_margin(maxwellian, **kwargs)
