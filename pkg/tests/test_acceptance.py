"""End-to-end acceptance checks; each appends one PASS/FAIL line to the session summary."""
import math
import time
import warnings

import numpy as np
import pytest

from vpdecay.characteristics import (characteristics_decay_report, picard_solve_characteristics,
                                     phase_points, straighten_map, synthetic_field)
from vpdecay.cli import synthetic_forcing
from vpdecay.dispersion import dispersion_transform, penrose_margin
from vpdecay.equilibria import make_equilibrium
from vpdecay.fitting import fit_decay
from vpdecay.grids import CartesianGrid
from vpdecay.kernel import (ResolutionWarning, assemble_physical_green, default_lp_table,
                            laplace_consistency, littlewood_paley_block, lp_spread,
                            resolvent_for_radii)
from vpdecay.response import (bootstrap_run, default_radial_grid, linear_response,
                              normalized_datum, resolvent_for_grid, weighted_norms)
from vpdecay.transport import free_decay_report, make_initial_datum


def record(log, n, ok, detail):
    log.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def test_criterion_1_dispersion_oracle(acceptance_log, maxwellian):
    tic = time.perf_counter()
    errs = [abs(dispersion_transform(maxwellian, 0.0, r) + 1 / (1 + r * r))
            for r in (0.5, 1.0, 2.0, 3.0)]
    wall = time.perf_counter() - tic
    ok = max(errs) < 1e-6 and wall < 1.0
    assert record(acceptance_log, 1, ok, f"max error {max(errs):.2e}, {wall:.2f} s")


def test_criterion_2_penrose_verdict(acceptance_log, maxwellian):
    tic = time.perf_counter()
    rep = penrose_margin(maxwellian)
    wall = time.perf_counter() - tic
    windings = set(rep.winding_counts.values())
    ok = rep.margin > 0 and windings == {0} and wall < 30
    assert record(acceptance_log, 2, ok,
                  f"margin {rep.margin:.4f}, windings {sorted(windings)}, {wall:.1f} s")


def test_criterion_3_resolvent_consistency(acceptance_log, maxwellian):
    tic = time.perf_counter()
    taus = np.array([-1.0, -0.5, 0.0, 0.5, 1.0]) - 0.5j
    radii = np.array([0.5, 1.0, 2.0, 3.0])
    errs = [laplace_consistency(resolvent_for_radii(maxwellian, radii, dt, 40.0), taus)
            for dt in (0.02, 0.01)]
    wall = time.perf_counter() - tic
    ratio = errs[0] / errs[1]
    ok = errs[0] < 1e-2 and 3.0 < ratio < 5.0 and wall < 60
    assert record(acceptance_log, 3, ok,
                  f"error {errs[0]:.2e} at dt 0.02, halving ratio {ratio:.2f}, {wall:.1f} s")


def test_criterion_4_green_kernel_rates(acceptance_log, maxwellian):
    tic = time.perf_counter()
    T = 50.0
    res = resolvent_for_radii(maxwellian, np.arange(0.0, 9.0 + 1e-9, 0.005), 0.05, T)
    t_samples = np.linspace(2.0, T, 49)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResolutionWarning)
        norms = assemble_physical_green(res, CartesianGrid(64, 40.0), 2, t_samples)
    wall = time.perf_counter() - tic
    d = 3
    parts, ok = [], wall < 600
    for k in range(3):
        e1 = fit_decay(norms.t, norms.series(k, "L1"), (2.0, T)).exponent
        ei = fit_decay(norms.t, norms.series(k, "Linf"), (2.0, T)).exponent
        ok &= abs(e1 + (k + 1)) <= 0.15 and abs(ei + (d + 1 + k)) <= 0.2
        parts.append(f"k={k} L1 {e1:.3f} (target {-(k + 1)}), Linf {ei:.3f} "
                     f"(target {-(d + 1 + k)})")
    assert record(acceptance_log, 4, ok, "; ".join(parts) + f"; {wall:.1f} s")


def test_criterion_5_littlewood_paley_envelopes(acceptance_log, maxwellian):
    table = default_lp_table(maxwellian, 2)
    t_samples = [1.0, 2.0, 5.0, 10.0, 20.0]
    blocks = [littlewood_paley_block(table, q, t_samples) for q in range(-3, 3)]
    spread = lp_spread(blocks)
    ok = set(spread) == {"low", "high"} and all(v[2] < 10 for v in spread.values())
    detail = ", ".join(f"{k} spread {v[2]:.2f}" for k, v in sorted(spread.items()))
    assert record(acceptance_log, 5, ok, detail + " (limit 10)")


def test_criterion_6_free_transport(acceptance_log):
    tic = time.perf_counter()
    f0 = make_initial_datum("gaussian", 3)
    rep = free_decay_report(f0, 2, np.geomspace(5.0, 100.0, 15))
    wall = time.perf_counter() - tic
    errs = []
    for k in range(3):
        errs.append(abs(rep.exponent(f"Linf_k{k}") + 3 + k))
        errs.append(abs(rep.exponent(f"L1_k{k}") + k))
    ok = max(errs) <= 0.05 and wall < 60
    assert record(acceptance_log, 6, ok, f"max exponent deviation {max(errs):.4f}, {wall:.1f} s")


def test_criterion_7_characteristics(acceptance_log):
    eps = 1e-2
    E = synthetic_field(eps)
    t_values = [5.0, 10.0, 20.0, 40.0]
    rep = characteristics_decay_report(E, t_values, 3, eps=eps)
    iters = max(rep.iterations.values())
    per_t = {w: [rep.max_ratio(w, t=t) for t in t_values] for w in ("Y", "W")}
    # bounded: ratios stay O(1) and their growth in t has flattened out by t = 40
    bounded = all(max(v) <= 10 and v[-1] <= 1.5 * v[-2] for v in per_t.values())
    sol = picard_solve_characteristics(E, 10.0, phase_points(3), 1e-13)
    st = straighten_map(sol, 2.0, sol.x[:8], sol.v[:8])
    ok = bounded and st.residual < 1e-8 and iters <= 10
    detail = (f"max ratio Y {max(per_t['Y']):.2f}, W {max(per_t['W']):.2f} "
              f"(t=20->40: {per_t['Y'][-2]:.2f}->{per_t['Y'][-1]:.2f}), "
              f"straightening residual {st.residual:.1e}, Picard iterations {iters}")
    assert record(acceptance_log, 7, ok, detail)


def _volterra(K, S, h):
    rho = np.zeros_like(S)
    for n in range(S.size):
        acc = 0.5 * K[n] * rho[0] + np.dot(K[1:n][::-1], rho[1:n])
        rho[n] = (S[n] + h * acc) / (1.0 - 0.5 * h * K[0])
    return rho


def test_criterion_8_linear_response(acceptance_log, maxwellian):
    T = 40.0
    grid = default_radial_grid(T, eq=maxwellian, dr=0.4)
    res = resolvent_for_grid(maxwellian, grid, 0.05, T)
    S = synthetic_forcing(grid, res.t_grid)
    rho = linear_response(S, res)
    t_out = np.arange(0.0, T + 1e-9, 0.5)
    Q = weighted_norms(t_out, rho.restrict(t_out).derivative_norms(2), 3, log_weight=True)
    late = t_out >= 30.0
    slope = fit_decay(t_out[late], Q[late]).exponent
    err = 0.0
    for m in np.linspace(0, grid.n - 1, 6).astype(int):
        oracle = _volterra(res.table.K[:, m], S.spectral[:, m], res.dt)
        scale = max(np.max(np.abs(oracle)), 1e-300)
        err = max(err, np.max(np.abs(rho.spectral[:, m] - oracle)) / scale)
    ok = np.max(Q) < 10 and slope <= 0.0 and err < 1e-6
    detail = (f"max Q {np.max(Q):.3f}, last-decade slope {slope:.3f}, "
              f"Volterra agreement {err:.1e}")
    assert record(acceptance_log, 8, ok, detail)


def _bootstrap(eps0, T=20.0):
    eq = make_equilibrium("maxwellian", 3)
    f0 = normalized_datum(eps0)
    grid = default_radial_grid(T, f0, eq, 0.4)
    res = resolvent_for_grid(eq, grid, 0.05, T)
    tic = time.perf_counter()
    states = bootstrap_run(f0, eq, res, T, 8, eps0, 100.0, N=2, grid=grid)
    return states, time.perf_counter() - tic


@pytest.fixture(scope="module")
def bootstrap_pair():
    return _bootstrap(1e-3), _bootstrap(5e-4)


def test_criterion_9_bootstrap(acceptance_log, bootstrap_pair):
    (full, wall), (half, _) = bootstrap_pair
    last, last_half = full[-1], half[-1]
    ratio = last_half.N_final / last.N_final
    ok = (len(full) <= 8 and last.change < 1e-6 and last.N_final <= 100 * 1e-3
          and abs(ratio - 0.5) <= 0.1 and wall < 600)
    detail = (f"{len(full)} iterations, N(T) change {last.change:.1e} "
              f"(final-time change {last.change_final:.1e}), N(T) {last.N_final:.3e}, "
              f"halving ratio {ratio:.3f}, {wall:.0f} s")
    assert record(acceptance_log, 9, ok, detail)


def test_criterion_10_quadratic_cancellation(acceptance_log, bootstrap_pair):
    (full, _), (half, _) = bootstrap_pair
    T1, T2 = (s[-1].forcing.ledger("T")[-1] for s in (full, half))
    L1, L2 = (s[-1].forcing.ledger("RL")[-1] for s in (full, half))
    rT, rL = T1 / T2, L1 / L2
    # eps^2 scaling: ratio 4 within a factor 2; eps scaling: ratio 2 within 20%
    ok = 2.0 <= rT <= 8.0 and abs(rL - 2.0) <= 0.4 and math.isfinite(rT)
    assert record(acceptance_log, 10, ok, f"R_L - R_NL ratio {rT:.3f}, R_L ratio {rL:.3f}")
