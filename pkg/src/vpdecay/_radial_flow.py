"""Compiled Picard solve for radial field histories.

Each phase-space point is iterated independently; the field
E(tau, x) = q(tau, |x|) x is interpolated exactly as
``FieldHistory.eval_nodes`` does (cubic in r, linear in time on a uniform time grid).
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _q_at(table, inv_dr, r_max, row, r):
    if r > r_max:
        return 0.0
    u = r * inv_dr
    j = int(u)
    f = u - j
    fm = f - 1.0
    fp = f + 1.0
    f2 = f - 2.0
    last = table.shape[1] - 1
    i0 = j - 1 if j >= 1 else 1
    i1 = j if j <= last else last
    i2 = j + 1 if j + 1 <= last else last
    i3 = j + 2 if j + 2 <= last else last
    return (-f * fm * f2 / 6.0 * table[row, i0] + 0.5 * fp * fm * f2 * table[row, i1]
            - 0.5 * fp * f * f2 * table[row, i2] + fp * f * fm / 6.0 * table[row, i3])


@njit(cache=True, inline="always")
def _field(table, inv_dr, r_max, t0, dt, n_s, tau, p0, p1, p2, out, j):
    if n_s == 1:
        row, lam = 0, 0.0
    else:
        x = (tau - t0) / dt
        if x <= 0.0:
            row, lam = 0, 0.0
        else:
            row = int(x)
            if row > n_s - 2:
                row = n_s - 2
            lam = min(x - row, 1.0)
    r = np.sqrt(p0 * p0 + p1 * p1 + p2 * p2)
    q = (1.0 - lam) * _q_at(table, inv_dr, r_max, row, r)
    if lam > 0.0:
        q += lam * _q_at(table, inv_dr, r_max, row + 1, r)
    out[j, 0] = q * p0
    out[j, 1] = q * p1
    out[j, 2] = q * p2


@njit(cache=True)
def radial_flow(table, dr, r_max, t0, dt, n_s, nodes, half, wr, A, C, s_values, w, v, tol, max_iter):
    """Y, W at s_values for each point; returns (Y, W, iterations, converged)."""
    n = nodes.size
    m = wr.size
    n_p = n // m
    P = w.shape[0]
    n_out = s_values.size
    Yout = np.zeros((n_out, P, 3))
    Wout = np.zeros((n_out, P, 3))
    iters = np.zeros(P, dtype=np.int64)
    ok = np.ones(P, dtype=np.bool_)
    eps = np.finfo(np.float64).eps
    inv_dr = 1.0 / dr
    Y = np.zeros((n, 3))
    Yn = np.zeros((n, 3))
    F = np.zeros((n, 3))
    for p in range(P):
        Y[:, :] = 0.0
        done = False
        it = 0
        while it < max_iter:
            it += 1
            for j in range(n):
                _field(table, inv_dr, r_max, t0, dt, n_s, nodes[j],
                       w[p, 0] + nodes[j] * v[p, 0] + Y[j, 0],
                       w[p, 1] + nodes[j] * v[p, 1] + Y[j, 1],
                       w[p, 2] + nodes[j] * v[p, 2] + Y[j, 2], F, j)
            # tail integrals of tau F and F, panel by panel from the end
            diff = 0.0
            big = 0.0
            for c in range(3):
                suf_a = 0.0
                suf_b = 0.0
                for q in range(n_p - 1, -1, -1):
                    base = q * m
                    full_a = 0.0
                    full_b = 0.0
                    for k in range(m):
                        full_a += wr[k] * nodes[base + k] * F[base + k, c]
                        full_b += wr[k] * F[base + k, c]
                    for jj in range(m):
                        la = 0.0
                        lb = 0.0
                        for k in range(m):
                            la += A[jj, k] * nodes[base + k] * F[base + k, c]
                            lb += A[jj, k] * F[base + k, c]
                        ta = half[q] * la + suf_a
                        tb = half[q] * lb + suf_b
                        val = ta - nodes[base + jj] * tb
                        d = abs(val - Y[base + jj, c])
                        if d > diff:
                            diff = d
                        if abs(val) > big:
                            big = abs(val)
                        Yn[base + jj, c] = val
                    suf_a += half[q] * full_a
                    suf_b += half[q] * full_b
            Y[:, :] = Yn
            if not np.isfinite(diff):
                break
            if diff < tol + 8.0 * eps * big:
                done = True
                break
        for j in range(n):
            _field(table, inv_dr, r_max, t0, dt, n_s, nodes[j],
                   w[p, 0] + nodes[j] * v[p, 0] + Y[j, 0],
                   w[p, 1] + nodes[j] * v[p, 1] + Y[j, 1],
                   w[p, 2] + nodes[j] * v[p, 2] + Y[j, 2], F, j)
        iters[p] = it
        ok[p] = done
        for i in range(n_out):
            for c in range(3):
                a = 0.0
                b = 0.0
                for j in range(n):
                    a += C[i, j] * (nodes[j] - s_values[i]) * F[j, c]
                    b += C[i, j] * F[j, c]
                Yout[i, p, c] = a
                Wout[i, p, c] = -b
    return Yout, Wout, iters, ok
