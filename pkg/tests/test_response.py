import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.polynomial.legendre import leggauss

from vpdecay.characteristics import picard_solve_characteristics
from vpdecay.equilibria import make_equilibrium
from vpdecay.errors import CapabilityError, ConfigurationError, InstabilityError, ParameterError
from vpdecay.grids import CartesianGrid, RadialGrid, radial_inverse_transform
from vpdecay.kernel import build_mode_kernel_table, uniform_time_grid
from vpdecay.response import (DensityHistory, ForcingQuadrature, assemble_forcing,
                              bilinear_reaction, bootstrap_run, default_radial_grid,
                              duhamel_residual, field_from_density, initial_term,
                              linear_response, normalized_datum, resolvent_for_grid,
                              running_ledger, s_panels, weighted_norms)
from vpdecay.transport import gaussian_free_oracle, make_initial_datum

T_SMALL = 6.0


def _free(f0, t_grid, grid):
    r = np.stack([grid.r, 0 * grid.r, 0 * grid.r], -1)
    return DensityHistory(t_grid, grid, values=np.array(
        [gaussian_free_oracle(t, r, amplitude=f0.amplitude) for t in t_grid]))


@pytest.fixture(scope="module")
def setup():
    eq = make_equilibrium("maxwellian", 3)
    f0 = normalized_datum(1e-3)
    grid = default_radial_grid(T_SMALL, f0, eq)
    t_nl = 0.25 * np.arange(int(T_SMALL / 0.25) + 1)
    # a strong radial density, so that the quadratic part is well above rounding
    rho = _free(f0, t_nl, grid).scaled(300.0)
    E = field_from_density(rho)
    E.spread = lambda s: math.hypot(1.0, s)
    return eq, f0, grid, t_nl, rho, E


def test_normalized_datum_has_requested_ledger():
    assert normalized_datum(2e-3).epsilon(2) == pytest.approx(2e-3)


def test_weighted_norms_by_hand():
    t = np.array([0.0, 1.0])
    norms = np.array([[[1.0, 2.0], [3.0, 4.0]], [[1.0, 1.0], [1.0, 1.0]]])
    got = weighted_norms(t, norms, 3)
    j = math.sqrt(2.0)
    assert got[0] == pytest.approx(max(1 + 2, 3 + 4))
    assert got[1] == pytest.approx(max(1 + j**3, j + j**4))
    assert weighted_norms(t, norms, 3, log_weight=True)[1] == pytest.approx(got[1] / math.log(3))


@given(st.lists(st.floats(0, 10), min_size=2, max_size=12))
def test_running_ledger_is_monotone(vals):
    t = np.arange(len(vals), dtype=float)
    norms = np.zeros((len(vals), 1, 2))
    norms[:, 0, 0] = vals
    led = running_ledger(t, norms, 3)
    assert np.all(np.diff(led) >= 0)
    assert led[-1] == pytest.approx(max(vals))


def test_density_history_round_trip_and_grid_checks():
    grid = RadialGrid(200, 0.1)
    t = np.array([0.0, 0.5, 1.0])
    vals = np.exp(-grid.r[None] ** 2 / (1 + t[:, None]))
    h = DensityHistory(t, grid, values=vals)
    assert h.roundtrip_error() < 1e-10
    other = DensityHistory(t, RadialGrid(200, 0.2), values=vals)
    with pytest.raises(ConfigurationError):
        h + other
    with pytest.raises(ConfigurationError):
        DensityHistory(t, grid, values=vals[:, :10])
    with pytest.raises(ParameterError):
        DensityHistory(t, grid)
    fine = h.refine(np.linspace(0, 1, 5))
    assert np.allclose(fine.restrict(t).values, vals, atol=1e-12)
    with pytest.raises(ConfigurationError):
        h.restrict([0.3])


def test_history_ledger_is_monotone(setup):
    _, _, _, _, rho, _ = setup
    led = rho.ledger(2)
    assert np.all(np.diff(led) >= 0)


def brute_volterra(K, S, h):
    """Direct trapezoid solve of rho = S + K * rho for one mode (K(0) = 0)."""
    rho = np.zeros_like(S)
    for n in range(S.size):
        acc = 0.0
        for j in range(1, n):
            acc += K[n - j] * rho[j]
        acc += 0.5 * K[n] * rho[0]
        rho[n] = (S[n] + h * acc) / (1.0 - 0.5 * h * K[0])
    return rho


def test_linear_response_matches_per_mode_volterra():
    eq = make_equilibrium("maxwellian", 3)
    grid = RadialGrid(120, 0.25)
    res = resolvent_for_grid(eq, grid, 0.05, 4.0)
    t = res.t_grid
    S = DensityHistory(t, grid, values=np.array(
        [np.exp(-0.5 * grid.r**2 / (1 + s * s)) * math.cos(s) for s in t]))
    rho = linear_response(S, res)
    table = build_mode_kernel_table(eq, t, grid.k)
    for m in (0, 5, 30, 90):
        oracle = brute_volterra(table.K[:, m], S.spectral[:, m], res.dt)
        assert np.max(np.abs(rho.spectral[:, m] - oracle)) < 1e-6 * np.max(np.abs(oracle))
    assert duhamel_residual(rho, S, table) < 1e-12 * np.max(np.abs(rho.values))
    zero = linear_response(DensityHistory.zeros(t, grid), res)
    assert not np.any(zero.values)


def test_linear_response_rejects_mismatched_grids():
    eq = make_equilibrium("maxwellian", 3)
    grid = RadialGrid(60, 0.25)
    res = resolvent_for_grid(eq, grid, 0.05, 2.0)
    bad_grid = DensityHistory.zeros(res.t_grid, RadialGrid(60, 0.3))
    with pytest.raises(ConfigurationError):
        linear_response(bad_grid, res)
    bad_time = DensityHistory.zeros(res.t_grid + 0.01, grid)
    with pytest.raises(ConfigurationError):
        linear_response(bad_time, res)
    res.G[:, 3] = np.nan
    with pytest.raises(InstabilityError):
        linear_response(DensityHistory.zeros(res.t_grid, grid), res)


def test_radial_field_matches_screened_potential_oracle():
    grid = RadialGrid(400, 0.05)
    t = np.array([0.0])
    rho = DensityHistory(t, grid, values=np.exp(-0.5 * grid.r[None] ** 2))
    E = field_from_density(rho)
    assert E.ledger["multiplier"] == 0.5
    rhat = lambda k: (2 * math.pi) ** 1.5 * np.exp(-0.5 * k * k)
    r = np.array([0.5, 1.0, 2.0, 3.0])
    h = 1e-4
    phi = lambda rr: radial_inverse_transform(lambda k: rhat(k) / (1 + k * k), rr, 14.0, 8000)
    Er = -(phi(r + h) - phi(r - h)) / (2 * h)
    pts = np.stack([r, 0 * r, 0 * r], -1)
    assert np.allclose(E(0.0, pts)[:, 0], Er, rtol=1e-5, atol=1e-9)


def test_cartesian_field_multiplier():
    grid = CartesianGrid(32, 20.0, 3)
    vals = np.exp(-0.5 * np.sum(grid.points**2, -1))[None]
    rho = DensityHistory(np.array([0.0]), grid, values=vals)
    E = field_from_density(rho)
    Fx = grid.to_spectral(E.samples[0, ..., 0])
    expect = -1j * grid.xi_axes[0] * rho.spectral[0] / (1 + grid.xi_norm**2)
    # the odd symbol is dropped on the Nyquist plane of the differentiated axis
    keep = np.abs(grid.xi_axes[0].ravel()) < grid.xi_axes[0].max()
    assert np.allclose(Fx[keep], expect[keep], atol=1e-12)
    # |E^| / |rho^| = |xi| / (1 + |xi|^2) peaks at 1/2 on |xi| = 1
    k = np.linspace(0, 5, 501)
    assert np.max(k / (1 + k * k)) == pytest.approx(0.5)


def test_s_panels_cover_interval_with_switch_break():
    s, w, switch = s_panels(9.0)
    assert np.sum(w) == pytest.approx(9.0)
    assert switch == 4.0
    assert np.sum(w * s**7) == pytest.approx(9.0**8 / 8, rel=1e-12)
    # no node straddles the switch: each panel lies on one side
    assert np.all((s < switch) | (s > switch))


def test_zero_field_gives_free_density(setup):
    eq, f0, grid, t_nl, _, _ = setup
    from vpdecay.characteristics import zero_field
    radii = np.array([0.0, 1.0, 4.0])
    for t in (0.5, 3.0):
        pts = np.stack([radii, 0 * radii, 0 * radii], -1)
        assert np.allclose(initial_term(f0, zero_field(), t, radii),
                           gaussian_free_oracle(t, pts, amplitude=f0.amplitude), rtol=1e-14)
        RL, T = bilinear_reaction(zero_field(), eq, t, radii)
        assert not np.any(RL) and not np.any(T)


def test_zero_field_forcing_is_free_density(setup):
    eq, f0, grid, t_nl, _, _ = setup
    from vpdecay.response import _radial_zero_field
    E = _radial_zero_field(t_nl, grid)
    dec = assemble_forcing(f0, eq, E, t_nl, grid)
    assert np.allclose(dec.S.values, _free(f0, t_nl, grid).values, rtol=0, atol=1e-18)
    assert not np.any(dec.T_term.values)


def test_zero_datum_bootstrap_stops_with_zero_density(setup):
    eq, _, _, _, _, _ = setup
    f0 = make_initial_datum("zero", 3)
    grid = RadialGrid(80, 0.5)
    res = resolvent_for_grid(eq, grid, 0.05, 2.0)
    states = bootstrap_run(f0, eq, res, T=2.0, grid=grid)
    assert len(states) == 1
    assert not np.any(states[0].rho.values)
    assert not states[0].violated


def spectral_reaction(eq, rho, t_values, radii):
    """-int_0^t K(t - s) rho^(s) ds per mode, rho linear in time between samples."""
    h = 0.0125
    tf = uniform_time_grid(h, float(rho.t_grid[-1]))
    tab = build_mode_kernel_table(eq, tf, rho.grid.k)
    F = np.array([np.interp(tf, rho.t_grid, rho.spectral[:, m]) for m in range(rho.grid.n)]).T
    out = []
    for t in t_values:
        n = int(round(t / h))
        w = np.full(n + 1, h)
        w[[0, -1]] *= 0.5
        conv = -np.einsum("j,jm,jm->m", w, tab.K[n::-1], F[:n + 1])
        prof = rho.grid.to_physical(conv)
        f0 = rho.grid.profile_derivatives(conv)[3]
        out.append(np.interp(radii, np.concatenate([[0.0], rho.grid.r]),
                             np.concatenate([[f0], prof])))
    return np.array(out)


def test_linear_reaction_matches_spectral_formula(setup):
    eq, _, _, _, rho, E = setup
    radii = np.array([0.0, 1.0, 3.0, 6.0])
    expect = spectral_reaction(eq, rho, (1.0, 5.0), radii)
    for i, t in enumerate((1.0, 5.0)):
        RL, _ = bilinear_reaction(E, eq, t, radii)
        assert np.max(np.abs(RL - expect[i])) < 1e-2 * np.max(np.abs(expect[i]))


def test_quadratic_part_against_brute_force(setup):
    eq, _, _, _, _, E = setup
    t, r = 2.0, 1.3
    _, T = bilinear_reaction(E, eq, t, np.array([r]))
    # full 3-D velocity trapezoid at a rotated copy of the output point
    x = np.full(3, r / math.sqrt(3))
    g = np.linspace(-7, 7, 40)
    V = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    wv = (g[1] - g[0]) ** 3
    xs, ws = leggauss(12)
    s_nodes, s_w = t / 2 * (xs + 1), t / 2 * ws
    sol = picard_solve_characteristics(E, t, (x[None] - t * V, V), 1e-13,
                                       np.concatenate([s_nodes, [t]]))
    total = 0.0
    for s, w in zip(s_nodes, s_w):
        lin = np.sum(E(s, x[None] - (t - s) * V) * eq.gradient(V), -1)
        Xs, Vs = sol.reconstruct(s)
        flowed = np.sum(E(s, Xs[0]) * eq.gradient(Vs[0]), -1)
        total += w * wv * np.sum(lin - flowed)
    assert T[0] == pytest.approx(total, rel=0.03)


def test_reaction_scaling_in_field_amplitude(setup):
    eq, _, _, _, rho, E = setup
    half = field_from_density(rho.scaled(0.5))
    half.spread = E.spread
    radii = np.array([0.0, 2.0, 5.0])
    RL1, T1 = bilinear_reaction(E, eq, 4.0, radii)
    RL2, T2 = bilinear_reaction(half, eq, 4.0, radii)
    assert np.allclose(RL2, 0.5 * RL1, rtol=1e-12)
    i = int(np.argmax(np.abs(T1)))
    assert T2[i] / T1[i] == pytest.approx(0.25, rel=0.05)
    _, T0 = bilinear_reaction(E, eq, 4.0, radii, frozen=True)
    assert not np.any(T0)


def test_frozen_forcing_has_no_quadratic_part(setup):
    eq, f0, grid, t_nl, _, E = setup
    short = t_nl[:5]
    quad = ForcingQuadrature(n_out=12)
    dec = assemble_forcing(f0, eq, E, short, grid, quad=quad, frozen=True)
    assert not np.any(dec.T_term.values)
    assert np.allclose(dec.RNL_term.values, dec.RL_term.values)
    assert np.all(dec.ledger("RL") >= 0)


@pytest.mark.parametrize("eq_args,datum", [
    (("double_bump", 3), ("gaussian", 3)),
    (("maxwellian", 2), ("gaussian", 2)),
    (("maxwellian", 3), ("bump", 3)),
])
def test_nonlinear_forcing_capabilities(setup, eq_args, datum):
    _, _, grid, t_nl, _, E = setup
    eq = make_equilibrium(eq_args[0], eq_args[1], u=1.0 if eq_args[0] == "double_bump" else None)
    f0 = make_initial_datum(datum[0], datum[1])
    with pytest.raises(CapabilityError):
        assemble_forcing(f0, eq, E, t_nl, grid)


def test_bootstrap_argument_checks(setup):
    eq, f0, grid, _, _, _ = setup
    res = resolvent_for_grid(eq, grid, 0.05, 2.0)
    with pytest.raises(ParameterError):
        bootstrap_run(f0, eq, res, T=2.0, eps0=0.0, grid=grid)
    with pytest.raises(ConfigurationError):
        bootstrap_run(f0, eq, res, T=4.0, grid=grid)
