"""Compiled kernels for the reduced geodesic flow (r, rho) at fixed p0.

Equations: r' = rho, rho' = p0 alpha'(r) / alpha(r)^3.  Inside |r| < C the
reduced flow is integrated with the adaptive Dormand-Prince 8(5,3) scheme
(the tangent system uses the 5(4) pair); on the
Euclidean ends alpha = |r| the motion is a straight line and is advanced in
closed form, r(u)^2 = r^2 + 2 r rho u + E u^2 with E = rho^2 + p0 / r^2.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit
from scipy.integrate._ivp import dop853_coefficients as _dop

# Dormand-Prince 8(5,3) tableau as published with scipy
_NS = _dop.N_STAGES
_DA = np.ascontiguousarray(_dop.A[:_NS, :_NS])
_DB = np.ascontiguousarray(_dop.B)
_DE3 = np.ascontiguousarray(_dop.E3)
_DE5 = np.ascontiguousarray(_dop.E5)

# status codes
OK = 0
UNDERFLOW = 1
MAXSTEPS = 2

_A21 = 1.0 / 5.0
_A31, _A32 = 3.0 / 40.0, 9.0 / 40.0
_A41, _A42, _A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
_A51, _A52, _A53, _A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
_A61, _A62, _A63, _A64, _A65 = 9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0
_B1, _B3, _B4, _B5, _B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
_E1, _E3, _E4, _E5, _E6, _E7 = (71.0 / 57600.0, -71.0 / 16695.0, 71.0 / 1920.0,
                                 -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0)
_MAX_STEPS = 50_000_000


@njit(cache=True)
def _clenshaw(c, x):
    b1 = 0.0
    b2 = 0.0
    x2 = 2.0 * x
    for k in range(c.size - 1, 0, -1):
        tmp = c[k] + x2 * b1 - b2
        b2 = b1
        b1 = tmp
    return c[0] + x * b1 - b2


@njit(cache=True)
def _horner(c, x):
    acc = 0.0
    for k in range(c.size - 1, -1, -1):
        acc = acc * x + c[k]
    return acc


@njit(cache=True)
def profile_eval(r, breaks, coeffs, corec):
    """(alpha, alpha', alpha'') at r."""
    s = abs(r)
    sg = 1.0 if r >= 0.0 else -1.0
    nseg = breaks.size - 1
    if s >= breaks[nseg]:
        return s, sg, 0.0
    if s < breaks[1]:
        return _horner(corec[0], s), sg * _horner(corec[1], s), _horner(corec[2], s)
    i = 1
    while i < nseg - 1 and s >= breaks[i + 1]:
        i += 1
    lo = breaks[i]
    hi = breaks[i + 1]
    x = (2.0 * s - lo - hi) / (hi - lo)
    return _clenshaw(coeffs[i, 0], x), sg * _clenshaw(coeffs[i, 1], x), _clenshaw(coeffs[i, 2], x)


@njit(cache=True)
def _accel(r, p0, breaks, coeffs, corec):
    """p0 alpha' / alpha^3 (alpha'' is not needed here)."""
    s = abs(r)
    sg = 1.0 if r >= 0.0 else -1.0
    nseg = breaks.size - 1
    if s >= breaks[nseg]:
        return p0 * sg / (s * s * s)
    if s < breaks[1]:
        a = _horner(corec[0], s)
        return p0 * sg * _horner(corec[1], s) / (a * a * a)
    i = 1
    while i < nseg - 1 and s >= breaks[i + 1]:
        i += 1
    lo = breaks[i]
    hi = breaks[i + 1]
    x = (2.0 * s - lo - hi) / (hi - lo)
    a = _clenshaw(coeffs[i, 0], x)
    return p0 * sg * _clenshaw(coeffs[i, 1], x) / (a * a * a)


@njit(cache=True)
def _accel_jac(r, p0, breaks, coeffs, corec):
    """rho' and its r-derivative p0 * d/dr(alpha' / alpha^3)."""
    a, d1, d2 = profile_eval(r, breaks, coeffs, corec)
    a3 = a * a * a
    return p0 * d1 / a3, p0 * (d2 / a3 - 3.0 * d1 * d1 / (a3 * a))


@njit(cache=True)
def _dp5_reduced(r, rho, p0, h, k1r, k1p, breaks, coeffs, corec, rtol, atol):
    """One DP5 step of (r, rho).  k1 = f(y) is passed in (FSAL)."""
    y2r = r + h * _A21 * k1r
    y2p = rho + h * _A21 * k1p
    k2r, k2p = y2p, _accel(y2r, p0, breaks, coeffs, corec)
    y3r = r + h * (_A31 * k1r + _A32 * k2r)
    y3p = rho + h * (_A31 * k1p + _A32 * k2p)
    k3r, k3p = y3p, _accel(y3r, p0, breaks, coeffs, corec)
    y4r = r + h * (_A41 * k1r + _A42 * k2r + _A43 * k3r)
    y4p = rho + h * (_A41 * k1p + _A42 * k2p + _A43 * k3p)
    k4r, k4p = y4p, _accel(y4r, p0, breaks, coeffs, corec)
    y5r = r + h * (_A51 * k1r + _A52 * k2r + _A53 * k3r + _A54 * k4r)
    y5p = rho + h * (_A51 * k1p + _A52 * k2p + _A53 * k3p + _A54 * k4p)
    k5r, k5p = y5p, _accel(y5r, p0, breaks, coeffs, corec)
    y6r = r + h * (_A61 * k1r + _A62 * k2r + _A63 * k3r + _A64 * k4r + _A65 * k5r)
    y6p = rho + h * (_A61 * k1p + _A62 * k2p + _A63 * k3p + _A64 * k4p + _A65 * k5p)
    k6r, k6p = y6p, _accel(y6r, p0, breaks, coeffs, corec)
    rn = r + h * (_B1 * k1r + _B3 * k3r + _B4 * k4r + _B5 * k5r + _B6 * k6r)
    pn = rho + h * (_B1 * k1p + _B3 * k3p + _B4 * k4p + _B5 * k5p + _B6 * k6p)
    k7r, k7p = pn, _accel(rn, p0, breaks, coeffs, corec)
    er = h * (_E1 * k1r + _E3 * k3r + _E4 * k4r + _E5 * k5r + _E6 * k6r + _E7 * k7r)
    ep = h * (_E1 * k1p + _E3 * k3p + _E4 * k4p + _E5 * k5p + _E6 * k6p + _E7 * k7p)
    sr = atol + rtol * max(abs(r), abs(rn))
    sp = atol + rtol * max(abs(rho), abs(pn))
    err = math.sqrt(0.5 * ((er / sr) ** 2 + (ep / sp) ** 2))
    return rn, pn, k7r, k7p, err


@njit(cache=True)
def _dop853_reduced(r, rho, p0, h, k1r, k1p, kr, kp, breaks, coeffs, corec, rtol, atol):
    """One DOP853 step; kr, kp are stage work arrays of length N_STAGES + 1."""
    kr[0] = k1r
    kp[0] = k1p
    for st in range(1, _NS):
        dr = 0.0
        dp = 0.0
        for j in range(st):
            dr += _DA[st, j] * kr[j]
            dp += _DA[st, j] * kp[j]
        yr = r + h * dr
        kr[st] = rho + h * dp
        kp[st] = _accel(yr, p0, breaks, coeffs, corec)
    dr = 0.0
    dp = 0.0
    for j in range(_NS):
        dr += _DB[j] * kr[j]
        dp += _DB[j] * kp[j]
    rn = r + h * dr
    pn = rho + h * dp
    kr[_NS] = pn
    kp[_NS] = _accel(rn, p0, breaks, coeffs, corec)
    e5r = 0.0
    e5p = 0.0
    e3r = 0.0
    e3p = 0.0
    for j in range(_NS + 1):
        e5r += _DE5[j] * kr[j]
        e5p += _DE5[j] * kp[j]
        e3r += _DE3[j] * kr[j]
        e3p += _DE3[j] * kp[j]
    sr = atol + rtol * max(abs(r), abs(rn))
    sp = atol + rtol * max(abs(rho), abs(pn))
    n5 = (e5r / sr) ** 2 + (e5p / sp) ** 2
    n3 = (e3r / sr) ** 2 + (e3p / sp) ** 2
    if n5 == 0.0 and n3 == 0.0:
        err = 0.0
    else:
        err = abs(h) * n5 / math.sqrt((n5 + 0.01 * n3) * 2.0)
    return rn, pn, kr[_NS], kp[_NS], err


@njit(cache=True)
def _next_h8(h, err):
    if err == 0.0:
        return 10.0 * h
    return h * min(10.0, max(0.2, 0.9 * err ** -0.125))


@njit(cache=True)
def _hmax(rho):
    # cap the spatial move per step so no profile segment is skipped
    return min(1.0 / (abs(rho) + 1e-6), 1e3)


@njit(cache=True)
def _next_h(h, err):
    if err == 0.0:
        return 5.0 * h
    return h * min(5.0, max(0.2, 0.9 * err ** -0.2))


@njit(cache=True)
def _line(s, v, E, u):
    """Closed-form straight-line motion on the ends: (|r|, outward speed) after time u."""
    s2 = s * s + 2.0 * s * v * u + E * u * u
    sn = math.sqrt(max(s2, 0.0))
    return sn, (s * v + E * u) / sn


@njit(cache=True)
def _entry_time(s, v, E, C):
    """Time to reach |r| = C moving inward, or -1 if the line stays outside."""
    p0 = s * s * (E - v * v)  # closest approach radius is sqrt(p0 / E)
    if v >= 0.0 or p0 >= E * C * C:
        return -1.0
    D = s * s * v * v - E * (s * s - C * C)
    q = -s * v + math.sqrt(max(D, 0.0))
    return (s * s - C * C) / q


@njit(cache=True)
def _crossing_time(s, v, E, rb):
    """Signed time at which the outgoing line passes |r| = rb."""
    D = s * s * v * v + E * (rb * rb - s * s)
    sq = math.sqrt(max(D, 0.0))
    den = s * v + sq
    if den > 0.0:
        return (rb * rb - s * s) / den
    return (-s * v + sq) / E


@njit(cache=True)
def advance(r, rho, p0, T, breaks, coeffs, corec, rtol, atol):
    """Flow (r, rho) forward by T >= 0.  Returns (r, rho, status, nsteps)."""
    C = breaks[breaks.size - 1]
    kr = np.empty(_NS + 1)
    kp = np.empty(_NS + 1)
    t = 0.0
    h = 0.05
    nsteps = 0
    k1r = rho
    k1p = _accel(r, p0, breaks, coeffs, corec)
    entered = False
    while t < T:
        s = abs(r)
        if s >= C and not entered:
            sg = 1.0 if r >= 0.0 else -1.0
            v = sg * rho
            E = rho * rho + p0 / (r * r)
            u_in = _entry_time(s, v, E, C)
            if u_in < 0.0 or t + u_in >= T:
                sn, vn = _line(s, v, E, T - t)
                return sg * sn, sg * vn, OK, nsteps
            sn, vn = _line(s, v, E, u_in)
            t += u_in
            r = sg * C
            rho = sg * vn
            k1r = rho
            k1p = _accel(r, p0, breaks, coeffs, corec)
            h = min(h, 0.05)
            entered = True
            continue
        hh = min(h, T - t, _hmax(rho))
        rn, pn, k7r, k7p, err = _dop853_reduced(r, rho, p0, hh, k1r, k1p, kr, kp,
                                                breaks, coeffs, corec, rtol, atol)
        nsteps += 1
        if nsteps > _MAX_STEPS:
            return r, rho, MAXSTEPS, nsteps
        if err <= 1.0:
            t += hh
            r, rho, k1r, k1p = rn, pn, k7r, k7p
            h = max(h, _next_h8(hh, err)) if hh < h else _next_h8(hh, err)
            entered = False
        else:
            h = _next_h8(hh, err)
            if h < 1e-14 * (1.0 + t):
                return r, rho, UNDERFLOW, nsteps
    return r, rho, OK, nsteps


@njit(cache=True)
def _hermite_cross(r0, v0, r1, v1, h, target):
    """Fraction in [0, 1] where the cubic Hermite interpolant of r hits target."""
    lo = 0.0
    hi = 1.0
    f_lo = r0 - target
    for _ in range(60):
        m = 0.5 * (lo + hi)
        m2 = m * m
        m3 = m2 * m
        val = ((2 * m3 - 3 * m2 + 1) * r0 + (m3 - 2 * m2 + m) * h * v0
               + (-2 * m3 + 3 * m2) * r1 + (m3 - m2) * h * v1)
        f = val - target
        if (f > 0.0) == (f_lo > 0.0):
            lo = m
            f_lo = f
        else:
            hi = m
    return 0.5 * (lo + hi)


@njit(cache=True)
def _refine_cross(r, rho, p0, k1r, k1p, hh, rn, pn, target, kr, kp, breaks, coeffs, corec, rtol, atol):
    """Offset in [0, hh] at which r crosses target inside an accepted step.

    Starts from the Hermite estimate and polishes it with two Newton
    corrections, each re-integrating the partial step.
    """
    u = _hermite_cross(r, rho, rn, pn, hh, target) * hh
    for _ in range(2):
        ru, pu, _a, _b, _e = _dop853_reduced(r, rho, p0, u, k1r, k1p, kr, kp, breaks, coeffs, corec, rtol, atol)
        if pu == 0.0:
            break
        u = min(max(u + (target - ru) / pu, 0.0), hh)
    return u


@njit(cache=True)
def _no_bin_between(bins, a, b):
    """True if no element of the sorted array bins lies strictly inside (a, b)."""
    i = np.searchsorted(bins, a, side="right")
    return i >= bins.size or bins[i] >= b


@njit(cache=True)
def exit_time(r, rho, p0, rb, tcap, rcrit, bins, breaks, coeffs, corec, rtol, atol):
    """First time |r| exceeds rb along the forward flow, or inf if not before tcap.

    If ``bins`` (sorted times) is nonempty, integration stops as soon as the
    monotone-escape bound (r rho >= 0 and |r| > rcrit give
    |r(t+u)| >= |r| + |rho| u) places the exit at some t_b with no bin time
    strictly between the current time and t_b.  The returned t_b then compares
    against every bin time exactly as the true exit time would, and the flag
    is 1.  Returns (time, flag, status).
    """
    C = breaks[breaks.size - 1]
    kr = np.empty(_NS + 1)
    kp = np.empty(_NS + 1)
    t = 0.0
    h = 0.05
    k1r = rho
    k1p = _accel(r, p0, breaks, coeffs, corec)
    nsteps = 0
    entered = False
    while True:
        s = abs(r)
        if bins.size and r * rho >= 0.0 and s > rcrit and rho != 0.0:
            t_bound = t + max(rb - s, 0.0) / abs(rho)
            if t_bound < tcap and _no_bin_between(bins, t, t_bound):
                return t_bound, 1, OK
        if s >= C and not entered:
            sg = 1.0 if r >= 0.0 else -1.0
            v = sg * rho
            E = rho * rho + p0 / (r * r)
            u_in = _entry_time(s, v, E, C)
            if u_in < 0.0 or s >= rb:
                tau = t + _crossing_time(s, v, E, rb)
                return (tau if tau <= tcap else np.inf), 0, OK
            if t + u_in >= tcap:
                return np.inf, 0, OK
            sn, vn = _line(s, v, E, u_in)
            t += u_in
            r = sg * C
            rho = sg * vn
            k1r = rho
            k1p = _accel(r, p0, breaks, coeffs, corec)
            h = min(h, 0.05)
            entered = True
            continue
        if t >= tcap:
            return np.inf, 0, OK
        hh = min(h, _hmax(rho), tcap - t + 1e-12)
        rn, pn, k7r, k7p, err = _dop853_reduced(r, rho, p0, hh, k1r, k1p, kr, kp,
                                                breaks, coeffs, corec, rtol, atol)
        nsteps += 1
        if nsteps > _MAX_STEPS:
            return np.nan, 0, MAXSTEPS
        if err <= 1.0:
            if abs(rn) >= rb and rb < C:
                target = rb if rn > 0 else -rb
                tau = t + _refine_cross(r, rho, p0, k1r, k1p, hh, rn, pn, target, kr, kp,
                                        breaks, coeffs, corec, rtol, atol)
                return (tau if tau <= tcap else np.inf), 0, OK
            t += hh
            r, rho, k1r, k1p = rn, pn, k7r, k7p
            h = max(h, _next_h8(hh, err)) if hh < h else _next_h8(hh, err)
            entered = False
        else:
            h = _next_h8(hh, err)
            if h < 1e-14 * (1.0 + t):
                return np.nan, 0, UNDERFLOW


@njit(cache=True)
def exit_times_batch(r, rho, p0, rb, tcap, rcrit, bins, breaks, coeffs, corec, rtol, atol):
    n = r.size
    out = np.empty(n)
    status = np.zeros(n, dtype=np.int64)
    for i in range(n):
        tau, _, st = exit_time(r[i], rho[i], p0[i], rb, tcap, rcrit, bins, breaks, coeffs, corec, rtol, atol)
        out[i] = tau
        status[i] = st
    return out, status


@njit(cache=True)
def advance_batch(r, rho, p0, T, breaks, coeffs, corec, rtol, atol):
    n = r.size
    ro = np.empty(n)
    po = np.empty(n)
    status = np.zeros(n, dtype=np.int64)
    for i in range(n):
        a, b, st, _ = advance(r[i], rho[i], p0[i], T, breaks, coeffs, corec, rtol, atol)
        ro[i] = a
        po[i] = b
        status[i] = st
    return ro, po, status


@njit(cache=True)
def _tan_rhs(y, p0, out, breaks, coeffs, corec):
    f, df = _accel_jac(y[0], p0, breaks, coeffs, corec)
    out[0] = y[1]
    out[1] = f
    # J' = [[0, 1], [df, 0]] J
    out[2] = y[4]
    out[3] = y[5]
    out[4] = df * y[2]
    out[5] = df * y[3]


@njit(cache=True)
def tangent_path(r, rho, p0, tgrid, breaks, coeffs, corec, rtol, atol):
    """Integrate (r, rho, J) and record them at the increasing times tgrid (tgrid[0] >= 0).

    Returns (states[n, 6], status).  J is stored row-major (J11, J12, J21, J22).
    """
    nt = tgrid.size
    out = np.empty((nt, 6))
    y = np.array([r, rho, 1.0, 0.0, 0.0, 1.0])
    k = np.empty((7, 6))
    tmp = np.empty(6)
    yn = np.empty(6)
    t = 0.0
    h = 0.01
    _tan_rhs(y, p0, k[0], breaks, coeffs, corec)
    j = 0
    nsteps = 0
    while j < nt:
        while j < nt and tgrid[j] <= t:
            out[j, :] = y
            j += 1
        if j >= nt:
            break
        hh = min(h, tgrid[j] - t, _hmax(y[1]))
        for i in range(6):
            tmp[i] = y[i] + hh * _A21 * k[0, i]
        _tan_rhs(tmp, p0, k[1], breaks, coeffs, corec)
        for i in range(6):
            tmp[i] = y[i] + hh * (_A31 * k[0, i] + _A32 * k[1, i])
        _tan_rhs(tmp, p0, k[2], breaks, coeffs, corec)
        for i in range(6):
            tmp[i] = y[i] + hh * (_A41 * k[0, i] + _A42 * k[1, i] + _A43 * k[2, i])
        _tan_rhs(tmp, p0, k[3], breaks, coeffs, corec)
        for i in range(6):
            tmp[i] = y[i] + hh * (_A51 * k[0, i] + _A52 * k[1, i] + _A53 * k[2, i] + _A54 * k[3, i])
        _tan_rhs(tmp, p0, k[4], breaks, coeffs, corec)
        for i in range(6):
            tmp[i] = y[i] + hh * (_A61 * k[0, i] + _A62 * k[1, i] + _A63 * k[2, i]
                                  + _A64 * k[3, i] + _A65 * k[4, i])
        _tan_rhs(tmp, p0, k[5], breaks, coeffs, corec)
        for i in range(6):
            yn[i] = y[i] + hh * (_B1 * k[0, i] + _B3 * k[2, i] + _B4 * k[3, i]
                                 + _B5 * k[4, i] + _B6 * k[5, i])
        _tan_rhs(yn, p0, k[6], breaks, coeffs, corec)
        # error norm: state components relative to themselves, J relative to its size
        jscale = max(abs(y[2]), abs(y[3]), abs(y[4]), abs(y[5]), 1.0)
        acc = 0.0
        for i in range(6):
            e = hh * (_E1 * k[0, i] + _E3 * k[2, i] + _E4 * k[3, i] + _E5 * k[4, i]
                      + _E6 * k[5, i] + _E7 * k[6, i])
            if i < 2:
                sc = atol + rtol * max(abs(y[i]), abs(yn[i]))
            else:
                sc = rtol * jscale
            acc += (e / sc) ** 2
        err = math.sqrt(acc / 6.0)
        nsteps += 1
        if nsteps > _MAX_STEPS:
            return out, MAXSTEPS
        if err <= 1.0:
            t += hh
            for i in range(6):
                y[i] = yn[i]
                k[0, i] = k[6, i]
            h = max(h, _next_h(hh, err)) if hh < h else _next_h(hh, err)
        else:
            h = _next_h(hh, err)
            if h < 1e-14 * (1.0 + t):
                return out, UNDERFLOW
    return out, OK


@njit(cache=True)
def tangent_log_norms(r, rho, p0, tgrid, breaks, coeffs, corec, rtol, atol):
    """log of the spectral norm of J(t) on tgrid, per sample: shape (n, nt)."""
    n = r.size
    nt = tgrid.size
    out = np.empty((n, nt))
    status = np.zeros(n, dtype=np.int64)
    for i in range(n):
        path, st = tangent_path(r[i], rho[i], p0[i], tgrid, breaks, coeffs, corec, rtol, atol)
        status[i] = st
        for j in range(nt):
            a, b, c, d = path[j, 2], path[j, 3], path[j, 4], path[j, 5]
            fro2 = a * a + b * b + c * c + d * d
            det = a * d - b * c
            disc = max(fro2 * fro2 - 4.0 * det * det, 0.0)
            smax2 = 0.5 * (fro2 + math.sqrt(disc))
            out[i, j] = 0.5 * math.log(smax2)
    return out, status
