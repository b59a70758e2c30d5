"""Numba kernels for the hot evaluation paths.

The numpy path in :mod:`divreg.field` defines the semantics (and is what the
brute-force oracles test); these kernels implement the same arithmetic with
fused per-point loops so that Euler integration and adjoint transport run at
volume scale.  All kernels share the storage convention of ``field``:
storage index ``s`` along an axis of basis order ``q`` holds the knot at
``origin + (s - q) * spacing``, and the bases that can be nonzero at cell
coordinate ``t`` are ``s = floor(t) + j`` for ``j in 0..q``.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(inline="always", cache=True)
def _bval(k: int, t: float) -> float:
    if k == 0:
        return 1.0 if (-0.5 <= t) and (t < 0.5) else 0.0
    a = abs(t)
    if k == 1:
        return 1.0 - a if a < 1.0 else 0.0
    if k == 2:
        if a < 0.5:
            return 0.75 - t * t
        if a < 1.5:
            return 0.5 * (1.5 - a) ** 2
        return 0.0
    if a < 1.0:
        return (4.0 - 3.0 * t * t * (2.0 - a)) / 6.0
    if a < 2.0:
        return (2.0 - a) ** 3 / 6.0
    return 0.0


@njit(inline="always", cache=True)
def _bder(k: int, t: float) -> float:
    return _bval(k - 1, t + 0.5) - _bval(k - 1, t - 0.5)


@njit(cache=True)
def _fill_weights(w, dw, base, orders, t0, t1, t2, inv_sp, counts):
    """Per-axis value and derivative weights for every component/axis pair.

    ``w``/``dw`` have shape (3 comps, 3 axes, 4); entries beyond order+1 and
    out-of-lattice indices are zeroed.  ``base`` holds floor(t) per axis.
    """
    t = (t0, t1, t2)
    for ax in range(3):
        base[ax] = int(np.floor(t[ax]))
    for c in range(3):
        for ax in range(3):
            q = orders[c, ax]
            shift = 0.5 * (q - 1)
            frac = t[ax] - base[ax]
            for j in range(4):
                if j <= q:
                    s = base[ax] + j
                    if 0 <= s < counts[c, ax]:
                        arg = frac - j + shift
                        w[c, ax, j] = _bval(q, arg)
                        dw[c, ax, j] = _bder(q, arg) * inv_sp[ax]
                    else:
                        w[c, ax, j] = 0.0
                        dw[c, ax, j] = 0.0
                else:
                    w[c, ax, j] = 0.0
                    dw[c, ax, j] = 0.0


@njit(inline="always", cache=True)
def _clampi(v: int, hi: int) -> int:
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


@njit(cache=True)
def vel_jac_field(c0, c1, c2, orders, origin, spacing, pts, want_jac, vel, jac):
    """Velocity and (optionally) Jacobian of a 3-component spline field."""
    n = pts.shape[0]
    inv_sp = np.empty(3)
    for ax in range(3):
        inv_sp[ax] = 1.0 / spacing[ax]
    counts = np.empty((3, 3), dtype=np.int64)
    for ax in range(3):
        counts[0, ax] = c0.shape[ax]
        counts[1, ax] = c1.shape[ax]
        counts[2, ax] = c2.shape[ax]
    w = np.empty((3, 3, 4))
    dw = np.empty((3, 3, 4))
    base = np.empty(3, dtype=np.int64)
    for p in range(n):
        t0 = (pts[p, 0] - origin[0]) * inv_sp[0]
        t1 = (pts[p, 1] - origin[1]) * inv_sp[1]
        t2 = (pts[p, 2] - origin[2]) * inv_sp[2]
        _fill_weights(w, dw, base, orders, t0, t1, t2, inv_sp, counts)
        for c in range(3):
            coeffs = c0 if c == 0 else (c1 if c == 1 else c2)
            hx = counts[c, 0] - 1
            hy = counts[c, 1] - 1
            hz = counts[c, 2] - 1
            val = 0.0
            g0 = 0.0
            g1 = 0.0
            g2 = 0.0
            for a in range(orders[c, 0] + 1):
                wa = w[c, 0, a]
                da = dw[c, 0, a]
                if wa == 0.0 and da == 0.0:
                    continue
                sa = _clampi(base[0] + a, hx)
                for b in range(orders[c, 1] + 1):
                    wb = w[c, 1, b]
                    db = dw[c, 1, b]
                    if wb == 0.0 and db == 0.0:
                        continue
                    sb = _clampi(base[1] + b, hy)
                    wab = wa * wb
                    dab = da * wb
                    adb = wa * db
                    for d in range(orders[c, 2] + 1):
                        wc = w[c, 2, d]
                        sc = _clampi(base[2] + d, hz)
                        v = coeffs[sa, sb, sc]
                        val += wab * wc * v
                        if want_jac:
                            g0 += dab * wc * v
                            g1 += adb * wc * v
                            g2 += wab * dw[c, 2, d] * v
            vel[p, c] = val
            if want_jac:
                jac[p, c, 0] = g0
                jac[p, c, 1] = g1
                jac[p, c, 2] = g2


@njit(inline="always", cache=True)
def _det3_i_plus(tau, j):
    m00 = 1.0 + tau * j[0, 0]
    m01 = tau * j[0, 1]
    m02 = tau * j[0, 2]
    m10 = tau * j[1, 0]
    m11 = 1.0 + tau * j[1, 1]
    m12 = tau * j[1, 2]
    m20 = tau * j[2, 0]
    m21 = tau * j[2, 1]
    m22 = 1.0 + tau * j[2, 2]
    return (
        m00 * (m11 * m22 - m12 * m21)
        - m01 * (m10 * m22 - m12 * m20)
        + m02 * (m10 * m21 - m11 * m20)
    )


@njit(cache=True)
def integrate_field(
    c0,
    c1,
    c2,
    orders,
    origin,
    spacing,
    pts,
    steps,
    tau,
    pad_lo,
    pad_hi,
    want_det,
    store_traj,
    traj,
    disp,
    flags,
    det,
):
    """Euler flow of all points, fused over steps.

    Velocity is evaluated analytically at each continuous trajectory point
    (zero outside the padded lattice).  When ``want_det`` the per-step
    determinants det(I + tau J) are chained; the minimum per-step
    determinant over all points is returned.  When ``store_traj`` the
    pre-step positions are recorded for the adjoint pass.
    """
    n = pts.shape[0]
    inv_sp = np.empty(3)
    for ax in range(3):
        inv_sp[ax] = 1.0 / spacing[ax]
    counts = np.empty((3, 3), dtype=np.int64)
    for ax in range(3):
        counts[0, ax] = c0.shape[ax]
        counts[1, ax] = c1.shape[ax]
        counts[2, ax] = c2.shape[ax]
    w = np.empty((3, 3, 4))
    dw = np.empty((3, 3, 4))
    base = np.empty(3, dtype=np.int64)
    jm = np.empty((3, 3))
    min_step_det = np.inf
    for p in range(n):
        m0 = pts[p, 0]
        m1 = pts[p, 1]
        m2 = pts[p, 2]
        dd = 1.0
        out = (
            m0 < pad_lo[0] or m0 > pad_hi[0]
            or m1 < pad_lo[1] or m1 > pad_hi[1]
            or m2 < pad_lo[2] or m2 > pad_hi[2]
        )
        for s in range(steps):
            if store_traj:
                traj[s, p, 0] = m0
                traj[s, p, 1] = m1
                traj[s, p, 2] = m2
            t0 = (m0 - origin[0]) * inv_sp[0]
            t1 = (m1 - origin[1]) * inv_sp[1]
            t2 = (m2 - origin[2]) * inv_sp[2]
            _fill_weights(w, dw, base, orders, t0, t1, t2, inv_sp, counts)
            v0 = 0.0
            v1 = 0.0
            v2 = 0.0
            for c in range(3):
                coeffs = c0 if c == 0 else (c1 if c == 1 else c2)
                hx = counts[c, 0] - 1
                hy = counts[c, 1] - 1
                hz = counts[c, 2] - 1
                val = 0.0
                g0 = 0.0
                g1 = 0.0
                g2 = 0.0
                for a in range(orders[c, 0] + 1):
                    wa = w[c, 0, a]
                    da = dw[c, 0, a]
                    if wa == 0.0 and da == 0.0:
                        continue
                    sa = _clampi(base[0] + a, hx)
                    for b in range(orders[c, 1] + 1):
                        wb = w[c, 1, b]
                        db = dw[c, 1, b]
                        if wb == 0.0 and db == 0.0:
                            continue
                        sb = _clampi(base[1] + b, hy)
                        wab = wa * wb
                        dab = da * wb
                        adb = wa * db
                        for d in range(orders[c, 2] + 1):
                            wc = w[c, 2, d]
                            sc = _clampi(base[2] + d, hz)
                            v = coeffs[sa, sb, sc]
                            val += wab * wc * v
                            if want_det:
                                g0 += dab * wc * v
                                g1 += adb * wc * v
                                g2 += wab * dw[c, 2, d] * v
                if c == 0:
                    v0 = val
                elif c == 1:
                    v1 = val
                else:
                    v2 = val
                if want_det:
                    jm[c, 0] = g0
                    jm[c, 1] = g1
                    jm[c, 2] = g2
            if want_det:
                sd = _det3_i_plus(tau, jm)
                if sd < min_step_det:
                    min_step_det = sd
                dd *= sd
            m0 += tau * v0
            m1 += tau * v1
            m2 += tau * v2
            if (
                m0 < pad_lo[0] or m0 > pad_hi[0]
                or m1 < pad_lo[1] or m1 > pad_hi[1]
                or m2 < pad_lo[2] or m2 > pad_hi[2]
            ):
                out = True
        disp[p, 0] = m0 - pts[p, 0]
        disp[p, 1] = m1 - pts[p, 1]
        disp[p, 2] = m2 - pts[p, 2]
        flags[p] = out
        if want_det:
            det[p] = dd
    return min_step_det


@njit(cache=True)
def adjoint_field(c0, c1, c2, orders, origin, spacing, traj, cot, tau, g0, g1, g2):
    """Reverse accumulation through the Euler steps.

    ``traj`` holds the stored pre-step positions from :func:`integrate_field`
    (shape (steps, n, 3)), ``cot`` the cotangent at the final positions.
    Accumulates tau * (dv(m_s)/dtheta)^T a_{s+1} into the per-component
    gradient lattices, transporting a backwards with (I + tau J)^T.
    """
    steps = traj.shape[0]
    n = traj.shape[1]
    inv_sp = np.empty(3)
    for ax in range(3):
        inv_sp[ax] = 1.0 / spacing[ax]
    counts = np.empty((3, 3), dtype=np.int64)
    for ax in range(3):
        counts[0, ax] = c0.shape[ax]
        counts[1, ax] = c1.shape[ax]
        counts[2, ax] = c2.shape[ax]
    w = np.empty((3, 3, 4))
    dw = np.empty((3, 3, 4))
    base = np.empty(3, dtype=np.int64)
    jm = np.empty((3, 3))
    for p in range(n):
        a0 = cot[p, 0]
        a1 = cot[p, 1]
        a2 = cot[p, 2]
        for s in range(steps - 1, -1, -1):
            m0 = traj[s, p, 0]
            m1 = traj[s, p, 1]
            m2 = traj[s, p, 2]
            t0 = (m0 - origin[0]) * inv_sp[0]
            t1 = (m1 - origin[1]) * inv_sp[1]
            t2 = (m2 - origin[2]) * inv_sp[2]
            _fill_weights(w, dw, base, orders, t0, t1, t2, inv_sp, counts)
            for c in range(3):
                coeffs = c0 if c == 0 else (c1 if c == 1 else c2)
                grad = g0 if c == 0 else (g1 if c == 1 else g2)
                ac = a0 if c == 0 else (a1 if c == 1 else a2)
                spray = tau * ac
                hx = counts[c, 0] - 1
                hy = counts[c, 1] - 1
                hz = counts[c, 2] - 1
                r0 = 0.0
                r1 = 0.0
                r2 = 0.0
                for a in range(orders[c, 0] + 1):
                    wa = w[c, 0, a]
                    da = dw[c, 0, a]
                    if wa == 0.0 and da == 0.0:
                        continue
                    sa = base[0] + a
                    if sa < 0 or sa > hx:
                        continue
                    for b in range(orders[c, 1] + 1):
                        wb = w[c, 1, b]
                        db = dw[c, 1, b]
                        if wb == 0.0 and db == 0.0:
                            continue
                        sb = base[1] + b
                        if sb < 0 or sb > hy:
                            continue
                        wab = wa * wb
                        dab = da * wb
                        adb = wa * db
                        for d in range(orders[c, 2] + 1):
                            wc = w[c, 2, d]
                            dc = dw[c, 2, d]
                            sc = base[2] + d
                            if sc < 0 or sc > hz:
                                continue
                            v = coeffs[sa, sb, sc]
                            w3 = wab * wc
                            grad[sa, sb, sc] += spray * w3
                            r0 += dab * wc * v
                            r1 += adb * wc * v
                            r2 += wab * dc * v
                jm[c, 0] = r0
                jm[c, 1] = r1
                jm[c, 2] = r2
            # a <- a + tau J^T a  (J rows indexed by component).
            n0 = a0 + tau * (jm[0, 0] * a0 + jm[1, 0] * a1 + jm[2, 0] * a2)
            n1 = a1 + tau * (jm[0, 1] * a0 + jm[1, 1] * a1 + jm[2, 1] * a2)
            n2 = a2 + tau * (jm[0, 2] * a0 + jm[1, 2] * a1 + jm[2, 2] * a2)
            a0 = n0
            a1 = n1
            a2 = n2
