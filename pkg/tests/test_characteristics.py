import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from vpdecay.characteristics import (AnalyticField, FieldHistory, constant_field,
                                     differentiate_characteristics, flow_at_start, flow_at_times, order2_identity_residual,
                                     phase_points, phi_field, picard_solve_characteristics,
                                     straighten_map, synthetic_field, time_nodes, zero_field)
from vpdecay.errors import DivergenceError, DomainError, InvertibilityError, ParameterError
from vpdecay.grids import RadialGrid

E0 = np.array([0.3, -0.1, 0.2])


@pytest.fixture(scope="module")
def points():
    return phase_points(3, 16)


@given(st.floats(0.5, 7.0), st.floats(0.0, 1.0), st.integers(0, 3))
def test_tail_quadrature_is_exact_for_panel_cubics(t, frac, p):
    nodes = time_nodes(t)
    s = frac * t
    C = nodes.tail_matrix([s])
    exact = (t ** (p + 1) - s ** (p + 1)) / (p + 1)
    assert (C @ nodes.nodes**p)[0] == pytest.approx(exact, rel=1e-12, abs=1e-12)
    tails = nodes.tail_apply(nodes.nodes**p)
    assert np.allclose(tails, (t ** (p + 1) - nodes.nodes ** (p + 1)) / (p + 1), atol=1e-11)
    assert nodes.total(nodes.nodes**p) == pytest.approx(t ** (p + 1) / (p + 1), rel=1e-12)


def test_tail_matrix_rejects_times_outside_window():
    with pytest.raises(DomainError):
        time_nodes(4.0, start=1.0).tail_matrix([0.5])


def test_zero_field_is_free_transport(points):
    sol = picard_solve_characteristics(zero_field(), 10.0, points)
    assert sol.iterations == 1
    assert not np.any(sol.Y) and not np.any(sol.W)


def test_constant_field_closed_form(points):
    sol = picard_solve_characteristics(constant_field(E0), 10.0, points)
    gap = (10.0 - sol.s_grid)[:, None, None]
    assert np.max(np.abs(sol.Y - E0 * gap**2 / 2)) < 1e-12
    assert np.max(np.abs(sol.W + E0 * gap)) < 1e-12


def test_time_dependent_field_against_quad(points):
    E = constant_field(E0, lambda s: (1 + s) ** -4)
    exact, _ = integrate.quad(lambda t: t * (1 + t) ** -4, 0, 10, epsabs=1e-14)
    errs = []
    for per_unit in (4, 8):
        sol = picard_solve_characteristics(E, 10.0, points, per_unit=per_unit)
        errs.append(np.max(np.abs(sol.Y[0] - E0 * exact)) / (exact * np.max(np.abs(E0))))
    # the steep start of (1 + t)^-4 limits 4-node panels; 8 nodes reach ~1e-9
    assert errs[0] < 5e-4
    assert errs[1] < 1e-8


def test_synthetic_flow_matches_ode_solver(points):
    E = synthetic_field(1e-2)
    sol = picard_solve_characteristics(E, 20.0, points, 1e-13)
    assert sol.iterations <= 10
    assert sol.residual < 1e-12
    X, V = sol.reconstruct(sol.s_grid)
    for m in range(4):
        def rhs(s, y):
            return np.concatenate([y[3:], E(s, y[None, :3])[0]])

        y0 = np.concatenate([sol.x[m], sol.v[m]])
        ode = integrate.solve_ivp(rhs, [20.0, 0.0], y0, rtol=1e-12, atol=1e-14,
                                  method="DOP853", dense_output=True)
        Z = ode.sol(sol.s_grid)
        assert np.max(np.abs(Z[:3].T - X[:, m])) < 1e-6
        assert np.max(np.abs(Z[3:].T - V[:, m])) < 1e-6


def test_order_two_identity(points):
    sol = picard_solve_characteristics(synthetic_field(1e-2), 10.0, points, 1e-13)
    stacks = differentiate_characteristics(sol, 2)
    resid, scale = order2_identity_residual(sol, stacks)
    assert resid < 1e-3 * scale


def test_derivative_stacks_shapes(points):
    sol = picard_solve_characteristics(synthetic_field(1e-2), 5.0, points, 1e-13,
                                       np.linspace(0, 5, 6))
    st_ = differentiate_characteristics(sol, 3)
    assert st_.Y[3].shape == (6, 16, 3, 3, 3, 3)
    assert st_.sup("W", 1).shape == (6,)
    # constant field: all v-derivatives vanish
    flat = picard_solve_characteristics(constant_field(E0), 5.0, points)
    assert np.max(differentiate_characteristics(flat, 1).sup("Y", 1)) < 1e-9
    with pytest.raises(ParameterError):
        differentiate_characteristics(sol, 4)


def test_straightening_map_inverts_flow(points):
    sol = picard_solve_characteristics(synthetic_field(1e-2), 10.0, points, 1e-13)
    s = 3.0
    x, v = sol.x[:6], sol.v[:6]
    res = straighten_map(sol, s, x, v)
    assert res.residual < 1e-8
    w = x - sol.t * res.psi
    Y, _ = flow_at_start(sol.field, sol.t, s, w, res.psi, 1e-13)
    X = w + s * res.psi + Y
    assert np.max(np.abs(X - (x - (sol.t - s) * v))) < 1e-8


def test_straightening_for_constant_field_is_shift(points):
    sol = picard_solve_characteristics(constant_field(E0), 10.0, points)
    res = straighten_map(sol, 4.0, sol.x[:3], sol.v[:3])
    # Phi = -E0 (t - s) / 2 is independent of v, so Psi = v + E0 (t - s) / 2
    assert np.allclose(res.psi - sol.v[:3], E0 * 3.0, atol=1e-9)


def test_strong_field_errors(points):
    # a strongly repulsive linear field: the Picard iterates grow like (100 t^2)^n / (2n)!
    E = AnalyticField(3, lambda s, x: 100.0 * x)
    sol = picard_solve_characteristics(synthetic_field(5.0), 6.0, points, 1e-12)
    with pytest.raises(InvertibilityError):
        straighten_map(sol, 0.0, sol.x[:4], sol.v[:4])
    with pytest.raises(DivergenceError):
        picard_solve_characteristics(E, 20.0, points, 1e-12)


def test_phi_field_continuity_and_strict(points):
    sol = picard_solve_characteristics(constant_field(E0), 6.0, points)
    phi = phi_field(sol)
    assert not np.any(phi[-1])
    assert np.allclose(phi[0], -E0 * 3.0)
    with pytest.raises(DomainError):
        phi_field(sol, strict=True)


def radial_history(q_func, n_t=9, dt=0.5, n_r=60, dr=0.25):
    grid = RadialGrid(n_r, dr)
    t = dt * np.arange(n_t)
    r = np.concatenate([[0.0], grid.r])
    return FieldHistory.from_radial(t, grid, np.array([q_func(tt, r) for tt in t]))


def test_field_history_reproduces_even_quadratics_linear_in_time():
    E = radial_history(lambda t, r: (1 + 2 * t) * (1 + 0.01 * r**2))
    rng = np.random.default_rng(3)
    x = rng.uniform(-8, 8, size=(50, 3))
    s = rng.uniform(0, 4, size=50)
    got = E.eval_nodes(s, x[:, None, :])[:, 0]
    r2 = np.sum(x * x, -1)
    expect = ((1 + 2 * s) * (1 + 0.01 * r2))[:, None] * x
    assert np.allclose(got, expect, rtol=1e-12)
    assert np.allclose(E(1.3, x[:5]), ((1 + 2.6) * (1 + 0.01 * r2[:5]))[:, None] * x[:5])
    # beyond the table the field is zero
    assert not np.any(E(1.0, np.array([[40.0, 0.0, 0.0]])))


def test_compiled_and_vectorised_flows_agree():
    E = radial_history(lambda t, r: -0.02 * np.exp(-0.1 * r**2) / (1 + t) ** 2)
    w, v = phase_points(3, 12)
    s_values = np.array([0.0, 0.7, 2.5, 4.0])
    Yc, Wc = flow_at_times(E, 4.0, 0.0, s_values, w, v)
    E.compiled = False
    Yn, Wn = flow_at_times(E, 4.0, 0.0, s_values, w, v)
    assert np.max(np.abs(Yc - Yn)) < 1e-14
    assert np.max(np.abs(Wc - Wn)) < 1e-14
    assert np.max(np.abs(Yc)) > 1e-4


def test_compiled_flow_reports_divergence():
    E = radial_history(lambda t, r: -50.0 * np.ones_like(r))
    w, v = phase_points(3, 4)
    with pytest.raises(DivergenceError):
        flow_at_times(E, 4.0, 0.0, [0.0], w, v)


def test_invalid_solver_arguments(points):
    with pytest.raises(ParameterError):
        picard_solve_characteristics(zero_field(), 1.0, points, tol=0.0)
    with pytest.raises(DomainError):
        picard_solve_characteristics(zero_field(), -1.0, points)
    with pytest.raises(ParameterError):
        picard_solve_characteristics(zero_field(), 1.0, (np.zeros((2, 3)), np.zeros((3, 3))))


def test_synthetic_field_ledger_matches_sampled_sup():
    E = synthetic_field(0.1)
    s = 3.0
    L = 1 + s
    # the sup of |y exp(-|y|^2/2)| is attained at |y| = 1
    x = np.array([[L, 0.0, 0.0]])
    assert np.linalg.norm(E(s, x)) == pytest.approx(E.sup_norm(s, 0), rel=1e-12)
    assert E.sup_norm(s, 1) == pytest.approx(0.1 * math.log(5) / L**4)
