"""Reduced geodesic flow on the unit cosphere bundle of a warped product.

States are (r, rho, p0): radial position, radial momentum and the conserved
angular Casimir p0 = |eta|^2.  On the unit shell rho^2 + p0 / alpha(r)^2 = 1.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels as K
from .geometry import Manifold, Profile, max_critical_radius

# single-trajectory accuracy (reversibility and energy checks rely on it)
RTOL = 1e-13
ATOL = 1e-15
# Monte Carlo exit times and tangent maps only need the coarser setting
MC_RTOL = 1e-10
MC_ATOL = 1e-14
SHELL_TOL = 1e-9


class IntegrationError(RuntimeError):
    """Step-size underflow or step budget exhausted."""


def kernel_args(profile: Profile) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(breaks, coeffs, core derivative table) in the layout the kernels expect."""
    cached = getattr(profile, "_kernel_args", None)
    if cached is not None:
        return cached
    g = np.polynomial.Polynomial(profile.core)
    rows = [g.coef, g.deriv().coef if g.degree() > 0 else np.zeros(1),
            g.deriv(2).coef if g.degree() > 1 else np.zeros(1)]
    m = max(len(c) for c in rows)
    corec = np.zeros((3, m))
    for i, c in enumerate(rows):
        corec[i, : len(c)] = c
    args = (profile.breaks, profile.coeffs, corec)
    object.__setattr__(profile, "_kernel_args", args)
    return args


@dataclass(frozen=True)
class ReducedState:
    r: float
    rho: float
    p0: float

    def shell_residual(self, profile: Profile) -> float:
        a = profile.alpha(self.r)
        return abs(self.rho**2 + self.p0 / a**2 - 1.0)

    @classmethod
    def on_shell(cls, profile: Profile, r: float, rho: float) -> "ReducedState":
        """State at (r, rho) with p0 chosen so the state lies on the unit shell."""
        if abs(rho) > 1.0:
            raise ValueError("|rho| must be <= 1 on the unit shell")
        a = profile.alpha(r)
        return cls(float(r), float(rho), float(a * a * (1.0 - rho * rho)))

    def check(self, profile: Profile) -> "ReducedState":
        if self.p0 < 0:
            raise ValueError("p0 must be nonnegative")
        res = self.shell_residual(profile)
        if res > SHELL_TOL:
            raise ValueError(f"state is off the unit shell by {res:.3e}")
        return self


@dataclass(frozen=True)
class TangentState:
    base: ReducedState
    J: np.ndarray

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.J))


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    r: np.ndarray
    rho: np.ndarray
    p0: float
    forward_exit: float
    backward_exit: float

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "r", "rho"])
            for row in zip(self.t, self.r, self.rho):
                w.writerow([repr(float(x)) for x in row])


def _check_status(status, what: str, context: str = "") -> None:
    status = np.atleast_1d(status)
    bad = np.flatnonzero(status != K.OK)
    if bad.size:
        kind = "step-size underflow" if status[bad[0]] == K.UNDERFLOW else "step budget exhausted"
        raise IntegrationError(f"{what}: {kind} for {bad.size} state(s), first index {bad[0]} {context}")


def flow_arrays(profile: Profile, r, rho, p0, t: float, rtol: float = RTOL, atol: float = ATOL):
    """Vectorised flow by time t (either sign); no shell check."""
    args = kernel_args(profile)
    r = np.ascontiguousarray(r, dtype=float)
    rho = np.ascontiguousarray(rho, dtype=float)
    p0 = np.ascontiguousarray(np.broadcast_to(p0, r.shape), dtype=float)
    sign = 1.0 if t >= 0 else -1.0
    ro, po, st = K.advance_batch(r, sign * rho, p0, abs(float(t)), *args, rtol, atol)
    _check_status(st, "flow")
    return ro, sign * po


def flow(state: ReducedState, t: float, profile: Profile, rtol: float = RTOL, atol: float = ATOL) -> ReducedState:
    """phi_t(state).  Negative t uses the reversal symmetry (r, rho) -> (r, -rho)."""
    args = kernel_args(profile)
    sign = 1.0 if t >= 0 else -1.0
    r, rho, st, _ = K.advance(state.r, sign * state.rho, state.p0, abs(float(t)), *args, rtol, atol)
    _check_status(st, "flow", f"(start r={state.r}, rho={state.rho}, p0={state.p0}, t={t})")
    return ReducedState(float(r), float(sign * rho), state.p0)


def tangent_flow(state: ReducedState, t: float, profile: Profile, rtol: float = MC_RTOL) -> TangentState:
    """Flow plus J = d(r(t), rho(t)) / d(r(0), rho(0)) at fixed p0."""
    args = kernel_args(profile)
    sign = 1.0 if t >= 0 else -1.0
    path, st = K.tangent_path(state.r, sign * state.rho, state.p0, np.array([abs(float(t))]), *args, rtol, MC_ATOL)
    _check_status(st, "tangent_flow")
    y = path[-1]
    J = np.array([[y[2], y[3]], [y[4], y[5]]])
    if sign < 0:
        # phi_{-t} = S phi_t S with S = diag(1, -1)
        S = np.diag([1.0, -1.0])
        J = S @ J @ S
    return TangentState(ReducedState(float(y[0]), float(sign * y[1]), state.p0), J)


def log_norm_paths(profile: Profile, r, rho, p0, tgrid, rtol: float = MC_RTOL) -> np.ndarray:
    """log ||J(t)|| (spectral norm) on tgrid for each starting state, shape (n, nt)."""
    args = kernel_args(profile)
    out, st = K.tangent_log_norms(np.ascontiguousarray(r, dtype=float), np.ascontiguousarray(rho, dtype=float),
                                  np.ascontiguousarray(p0, dtype=float), np.ascontiguousarray(tgrid, dtype=float),
                                  *args, rtol, MC_ATOL)
    _check_status(st, "tangent_flow")
    return out


def exit_times(profile: Profile, r, rho, p0, r_ball: float, t_cap: float, bins=None,
               rtol: float = MC_RTOL, atol: float = MC_ATOL) -> np.ndarray:
    """Forward exit times from {|r| <= r_ball}; inf when still inside at t_cap.

    With ``bins`` given, a returned time may be an upper bound that falls
    between the same pair of bin times as the true exit time (so every
    comparison ``tau > b`` with b in bins is exact); this is much cheaper.
    """
    args = kernel_args(profile)
    bins = np.empty(0) if bins is None else np.sort(np.asarray(bins, dtype=float))
    rcrit = max_critical_radius(profile) if bins.size else 0.0
    tau, st = K.exit_times_batch(np.ascontiguousarray(r, dtype=float), np.ascontiguousarray(rho, dtype=float),
                                 np.ascontiguousarray(p0, dtype=float), float(r_ball), float(t_cap),
                                 float(rcrit), bins, *args, rtol, atol)
    _check_status(st, "exit_times")
    return tau


@dataclass(frozen=True)
class Membership:
    in_T: bool
    forward_escape_time: float
    backward_escape_time: float
    extrapolated: bool


def trapped_membership(state: ReducedState, t: float, manifold: Manifold,
                       r_ball: float | None = None) -> Membership:
    """Is state in T(t) = pi^{-1}(B) cap phi_{-t}(pi^{-1}(B))?

    B is convex for the radius function |r|, so membership is equivalent to
    the forward exit time exceeding t.  Integration stops early once the
    monotone-escape bound already places |r| outside B before time t.
    Escape times are exact (inf if beyond the integrated horizon) unless
    ``extrapolated`` is set, in which case the forward time is an upper bound.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    prof = manifold.profile
    rb = manifold.r1 if r_ball is None else float(r_ball)
    args = kernel_args(prof)
    if abs(state.r) > rb:
        return Membership(False, 0.0, 0.0, False)
    rcrit = max_critical_radius(prof)
    bins = np.array([float(t)])
    fwd, flag, st = K.exit_time(state.r, state.rho, state.p0, rb, float(t), rcrit, bins, *args, RTOL, ATOL)
    _check_status(st, "trapped_membership")
    bwd, _, st = K.exit_time(state.r, -state.rho, state.p0, rb, float(t), rcrit, bins, *args, RTOL, ATOL)
    _check_status(st, "trapped_membership")
    in_T = bool(fwd > t)
    return Membership(in_T, float(fwd), float(bwd), bool(flag))


def trajectory(state: ReducedState, tgrid, manifold: Manifold, r_ball: float | None = None) -> Trajectory:
    """Sample the flow on an increasing time grid (starting at any t >= 0)."""
    tgrid = np.asarray(tgrid, dtype=float)
    if tgrid.ndim != 1 or np.any(np.diff(tgrid) <= 0):
        raise ValueError("time grid must be strictly increasing")
    prof = manifold.profile
    rs = np.empty(tgrid.size)
    ps = np.empty(tgrid.size)
    cur = flow(state, tgrid[0], prof) if tgrid[0] != 0 else state
    rs[0], ps[0] = cur.r, cur.rho
    for i in range(1, tgrid.size):
        cur = flow(cur, tgrid[i] - tgrid[i - 1], prof)
        rs[i], ps[i] = cur.r, cur.rho
    rb = manifold.r1 if r_ball is None else float(r_ball)
    horizon = float(tgrid[-1])
    fwd = exit_times(prof, [state.r], [state.rho], [state.p0], rb, horizon, rtol=RTOL, atol=ATOL)[0]
    bwd = exit_times(prof, [state.r], [-state.rho], [state.p0], rb, horizon, rtol=RTOL, atol=ATOL)[0]
    return Trajectory(tgrid, rs, ps, state.p0, float(fwd), float(bwd))
