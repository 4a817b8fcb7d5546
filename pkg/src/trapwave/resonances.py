"""Resonances of the angular-mode operators by complex scaling, with a shooting oracle.

Each mode operator -d^2 + W_k is continued to the contour z = r + i g(r),
where g vanishes on [-r1, r1] and equals r tan(theta) beyond 2 r1.  On the
scaled part the potential is the exact end formula (k^2 - 1/4) / z^2, so no
numerically defined profile is ever continued.  Discretization: conservative
second differences on a uniform r-grid,

    A = D^T diag(1 / z'_{i+1/2}) D / h^2 + diag(W z'),   M = diag(z'),

and the eigenproblem A u = omega^2 M u is solved in the complex-symmetric
form M^{-1/2} A M^{-1/2}.  Symmetric profiles split into even and odd blocks.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, linalg, optimize, sparse, special
from scipy.sparse import linalg as splinalg

from . import svg
from .geometry import Manifold
from .spectral import mode_potential

TOL_POS = 1e-8


@dataclass(frozen=True)
class ScalingProfile:
    """Contour deformation g(r) = sign(r) |r| tan(theta) b((|r| - r1) / r1), b a C^5 smoothstep."""

    theta: float
    r_start: float

    def __post_init__(self):
        if not 0.0 < self.theta < math.pi / 4 and self.theta != 0.0:
            raise ValueError("theta must lie in (0, pi/4) (or be 0 for the unscaled operator)")

    def g(self, r):
        r = np.asarray(r, dtype=float)
        s = np.abs(r)
        x = np.clip((s - self.r_start) / self.r_start, 0.0, 1.0)
        return np.sign(r) * s * math.tan(self.theta) * special.betainc(6.0, 6.0, x)

    def dg(self, r):
        r = np.asarray(r, dtype=float)
        s = np.abs(r)
        x = np.clip((s - self.r_start) / self.r_start, 0.0, 1.0)
        b = special.betainc(6.0, 6.0, x)
        db = x ** 5 * (1.0 - x) ** 5 / special.beta(6.0, 6.0) / self.r_start
        return math.tan(self.theta) * (b + s * db)

    def z(self, r):
        return np.asarray(r, dtype=float) + 1j * self.g(r)

    def dz(self, r):
        return 1.0 + 1j * self.dg(r)


@dataclass(frozen=True)
class ComplexScaledOperator:
    """One parity block (0 even, 1 odd) of the scaled mode-k operator on [0, L] with spacing h.

    ``diag`` / ``off`` hold the complex-symmetric tridiagonal M^{-1/2} A M^{-1/2}.
    """

    k: int
    parity: int
    h: float
    L: float
    scaling: ScalingProfile
    r: np.ndarray
    diag: np.ndarray
    off: np.ndarray

    @property
    def n(self) -> int:
        return self.r.size

    def matrix(self) -> sparse.csc_matrix:
        return sparse.diags([self.off, self.diag, self.off], [-1, 0, 1], format="csc")

    def dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.off, 1) + np.diag(self.off, -1)


def _check_scaling(manifold: Manifold, scaling: ScalingProfile) -> None:
    if manifold.d != 2:
        raise ValueError("resonances are computed for d = 2 only")
    if scaling.r_start < manifold.profile.end_radius:
        raise ValueError("scaling must start where the profile is exactly Euclidean (r1 >= C)")


def scaled_potential(manifold: Manifold, k: int, scaling: ScalingProfile, r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    w = mode_potential(manifold.profile, k, r).astype(complex)
    act = np.abs(r) > scaling.r_start
    z = scaling.z(r[act])
    w[act] = (k * k - 0.25) / (z * z)
    return w


def build_scaled_operator(manifold: Manifold, k: int, scaling: ScalingProfile, L: float, h: float,
                          parity: int) -> ComplexScaledOperator:
    """Scaled operator block on the symmetric grid r_i = i h, |i| < L / h, Dirichlet at +-L."""
    _check_scaling(manifold, scaling)
    n_half = int(round(L / h))
    if abs(n_half * h - L) > 1e-9 * L:
        raise ValueError("L must be a multiple of h")
    if parity not in (0, 1):
        raise ValueError("parity must be 0 or 1")
    i = np.arange(parity, n_half)
    r = i * h
    dz = scaling.dz(r)
    dzh = scaling.dz((np.arange(parity, n_half) + 0.5) * h)  # z' at r_{i+1/2}
    w = scaled_potential(manifold, k, scaling, r)
    inv = 1.0 / (h * h)
    a_diag = inv * (1.0 / dzh + 1.0 / np.r_[scaling.dz(np.array([(parity - 0.5) * h])), dzh[:-1]]) + w * dz
    a_off = -inv / dzh[:-1]
    if parity == 0:
        # even block: u_{-1} = u_1 folds the left coupling into row 0
        a_diag[0] = inv * 2.0 / dzh[0] + w[0] * dz[0]
        a_off = a_off.copy()
        a_off[0] *= math.sqrt(2.0)
    s = 1.0 / np.sqrt(dz)
    return ComplexScaledOperator(int(k), parity, float(h), float(L), scaling, r,
                                 a_diag * s * s, a_off * s[:-1] * s[1:])


@dataclass
class ResonanceSet:
    """Resonances omega (Im <= 0) with their mode, parity, residual and scaling angle."""

    omega: np.ndarray
    k: np.ndarray
    parity: np.ndarray
    residual: np.ndarray
    theta: float
    flagged: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.omega.size

    @staticmethod
    def concat(sets: list["ResonanceSet"]) -> "ResonanceSet":
        if not sets:
            return ResonanceSet(np.empty(0, complex), np.empty(0, int), np.empty(0, int), np.empty(0), float("nan"))
        return ResonanceSet(np.concatenate([s.omega for s in sets]), np.concatenate([s.k for s in sets]),
                            np.concatenate([s.parity for s in sets]), np.concatenate([s.residual for s in sets]),
                            sets[0].theta, sum((s.flagged for s in sets), []))

    def multiplicity(self) -> np.ndarray:
        return np.where(self.k == 0, 1, 2)

    def to_csv(self, path: str | Path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["k", "parity", "re_omega", "im_omega", "residual", "theta"])
            for om, k, p, res in zip(self.omega, self.k, self.parity, self.residual):
                w.writerow([int(k), int(p), repr(float(om.real)), repr(float(om.imag)), repr(float(res)), self.theta])

    def to_svg(self, path: str | Path, title: str = "resonances") -> None:
        svg.line_plot([svg.Series(self.omega.real, self.omega.imag, "resonances", markers=True)], path,
                      title=title, xlabel="Re omega", ylabel="Im omega")


def in_trust_region(omega, theta: float, margin: float = 0.8) -> np.ndarray:
    """Resonances with arg omega > -margin * theta are separated from the rotated continuum."""
    omega = np.asarray(omega)
    return (omega.real > 0) & (np.angle(omega) > -margin * theta)


def _select(op: ComplexScaledOperator, vals: np.ndarray, vecs: np.ndarray | None, box) -> ResonanceSet:
    om = np.sqrt(vals.astype(complex))
    om = np.where(om.real < 0, -om, om)  # principal root with Re >= 0
    re_lo, re_hi, beta = box
    res = np.zeros(om.size)
    if vecs is not None:
        A = op.matrix()
        for j in range(om.size):
            v = vecs[:, j]
            res[j] = np.linalg.norm(A @ v - vals[j] * v) / (np.linalg.norm(v) * max(abs(vals[j]), 1.0))
    keep = (om.real >= re_lo) & (om.real <= re_hi) & (om.imag >= -beta)
    bad = keep & (om.imag > TOL_POS)
    trust = in_trust_region(om, op.scaling.theta)
    flagged = [complex(x) for x in om[keep & ~trust]]
    keep &= trust & ~bad
    flagged += [complex(x) for x in om[bad]]
    n = int(keep.sum())
    return ResonanceSet(om[keep], np.full(n, op.k), np.full(n, op.parity), res[keep], op.scaling.theta, flagged)


def compute_mode_resonances(op: ComplexScaledOperator, box: tuple[float, float, float],
                            nev: int = 12, dense: bool | None = None) -> ResonanceSet:
    """Eigenvalues of one scaled block with omega in [re_lo, re_hi] + i[-beta, 0].

    Dense for small blocks, otherwise shift-invert about the box centre with
    nev grown until the farthest returned value lies outside the box.
    """
    re_lo, re_hi, beta = box
    if dense is None:
        dense = op.n <= 4000
    if dense:
        vals, vecs = linalg.eig(op.dense())
        return _select(op, vals, vecs, box)
    centre = (0.5 * (re_lo + re_hi) - 0.5j * beta) ** 2
    corners = np.array([re_lo, re_hi, re_lo - 1j * beta, re_hi - 1j * beta]) ** 2
    radius = float(np.max(np.abs(corners - centre)))
    A = op.matrix()
    m = nev
    while True:
        m = min(m, op.n - 2)
        vals, vecs = splinalg.eigs(A, k=m, sigma=centre, which="LM", tol=1e-13)
        if np.max(np.abs(vals - centre)) > radius or m >= op.n - 2:
            return _select(op, vals, vecs, box)
        m *= 2


def absorbing_length(scaling: ScalingProfile, omega: complex, decades: float = 16.0) -> float:
    """Domain half-length so an outgoing wave at omega decays by 10^-decades across the fully scaled part."""
    rate = omega.real * math.tan(scaling.theta) - abs(omega.imag)
    if rate <= 0:
        raise ValueError("resonance not uncovered by this scaling angle")
    return 2.0 * scaling.r_start + decades * math.log(10.0) / rate


def refine_resonance(manifold: Manifold, k: int, parity: int, omega0: complex, scaling: ScalingProfile,
                     L: float | None = None, h0: float = 4e-3, levels: int = 3) -> tuple[complex, float]:
    """Richardson-extrapolated resonance from grids h0, h0/2, ...; returns (omega, error estimate)."""
    if L is None:
        L = absorbing_length(scaling, complex(omega0))
    L = h0 * math.ceil(L / h0)
    ests = []
    guess = omega0
    for lev in range(levels):
        h = h0 / 2 ** lev
        op = build_scaled_operator(manifold, k, scaling, L, h, parity)
        vals = splinalg.eigs(op.matrix(), k=1, sigma=guess ** 2, which="LM", tol=1e-14, return_eigenvectors=False)
        om = np.sqrt(complex(vals[0]))
        om = -om if om.real < 0 else om
        ests.append(om)
        guess = om
    table = [ests]
    for p in range(1, levels):
        prev = table[-1]
        f = 4.0 ** p
        table.append([(f * prev[i + 1] - prev[i]) / (f - 1.0) for i in range(len(prev) - 1)])
    best = table[-1][0]
    err = abs(best - table[-2][-1]) if levels > 1 else float("nan")
    return complex(best), float(err)


# ---------------------------------------------------------------- shooting oracle


def outgoing(k: int, omega: complex, r: float) -> tuple[complex, complex]:
    """sqrt(omega r) H^(1)_k(omega r) and its r-derivative."""
    x = omega * r
    h = special.hankel1(k, x)
    dh = special.h1vp(k, x)
    s = np.sqrt(x)
    return complex(s * h), complex(omega * (0.5 * h / s + s * dh))


def outgoing_mp(k: int, omega: complex, r: float, dps: int = 30) -> tuple[complex, complex]:
    """Arbitrary-precision version of :func:`outgoing` (cross-check)."""
    import mpmath as mp
    with mp.workdps(dps):
        w = mp.mpc(omega.real, omega.imag)
        f = lambda rr: mp.sqrt(w * rr) * mp.hankel1(k, w * rr)
        return complex(f(r)), complex(mp.diff(f, r))


def _check_oracle_domain(manifold: Manifold, omega: complex) -> None:
    C = manifold.profile.end_radius
    if abs(omega) * C < 2.0 or abs(omega.imag) > 0.5 * omega.real:
        raise ValueError("shooting oracle needs |omega| C >= 2 and |Im omega| <= Re omega / 2")


def shooting_determinant(manifold: Manifold, k: int, omega: complex, rtol: float = 1e-12) -> complex:
    """Wronskian at r = C of the solution outgoing to the left, integrated across [-C, C], with the right outgoing one."""
    omega = complex(omega)
    _check_oracle_domain(manifold, omega)
    C = manifold.profile.end_radius
    f0, df0 = outgoing(k, omega, C)
    prof = manifold.profile
    w2 = omega * omega

    def rhs(r, y):
        wk = mode_potential(prof, k, np.array([r]))[0]
        return [y[1], (wk - w2) * y[0]]

    sol = integrate.solve_ivp(rhs, (-C, C), [f0, -df0], method="DOP853", rtol=rtol, atol=rtol * 1e-3 * abs(f0))
    if not sol.success:
        raise RuntimeError(sol.message)
    y, dy = sol.y[0, -1], sol.y[1, -1]
    return complex((y * df0 - dy * f0) / (f0 * f0))


def shooting_oracle(manifold: Manifold, k: int, omega0: complex, tol: float = 1e-13) -> complex:
    """Root of the shooting determinant near omega0 (complex secant)."""
    return complex(optimize.newton(lambda w: shooting_determinant(manifold, k, w), complex(omega0),
                                   x1=complex(omega0) * (1 + 1e-4), tol=tol, maxiter=60))


# ---------------------------------------------------------------- theta-stable sets and counting


def stable_mode_resonances(manifold: Manifold, k: int, parity: int, box: tuple[float, float, float],
                           theta: float, dtheta: float = 0.1, h: float = 0.02, L: float | None = None,
                           match: float = 1e-3, dense: bool | None = None) -> ResonanceSet:
    """Eigenvalues in the box that persist under theta -> theta - dtheta (spurious ones move)."""
    re_lo, re_hi, beta = box
    lo_theta = theta - dtheta
    sc_a, sc_b = ScalingProfile(theta, manifold.r1), ScalingProfile(lo_theta, manifold.r1)
    if L is None:
        probe = complex(max(re_lo, 0.5), -beta)
        try:
            L = absorbing_length(sc_b, probe, decades=8.0)
        except ValueError:
            L = 2 * manifold.r1 + 8.0
    L = h * math.ceil(L / h)
    a = compute_mode_resonances(build_scaled_operator(manifold, k, sc_a, L, h, parity), box, dense=dense)
    b = compute_mode_resonances(build_scaled_operator(manifold, k, sc_b, L, h, parity), box, dense=dense)
    keep = np.array([len(b) > 0 and np.min(np.abs(b.omega - w)) <= match * max(1.0, abs(w)) for w in a.omega],
                    dtype=bool)
    flagged = a.flagged + [complex(w) for w in a.omega[~keep]]
    return ResonanceSet(a.omega[keep], a.k[keep], a.parity[keep], a.residual[keep], theta, flagged)


@dataclass(frozen=True)
class CountResult:
    R: float
    beta: float
    count: int
    resonances: ResonanceSet
    k_max: int


def count_resonances(manifold: Manifold, R: float, beta: float, theta: float = 0.35,
                     points_per_wavelength: float = 24.0, k_range: tuple[int, int] | None = None,
                     box_width: float = 1.0, refine: bool = True) -> CountResult:
    """N(R, beta): resonances in [R, R + 1] + i[-beta, 0], modes +-k counted twice.

    Candidates come from theta-stable shift-invert solves on a coarse grid and
    are then Richardson-refined; membership is decided on the refined values.
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    if beta >= R * math.tan(0.8 * (theta - 0.1)):
        raise ValueError("beta outside the trust region of this scaling angle")
    r1 = manifold.r1
    h = 2 * math.pi / (points_per_wavelength * (R + box_width))
    if k_range is None:
        amax = float(np.max(manifold.profile.alpha(np.linspace(-r1, r1, 2001))))
        k_range = (0, int(math.ceil((R + box_width) * amax)))
    pad = 0.05 * (1.0 + beta)  # search slightly beyond the box, decide after refinement
    search = (R - pad, R + box_width + pad, beta + pad)
    sets = []
    scaling = ScalingProfile(theta, r1)
    for k in range(k_range[0], k_range[1] + 1):
        for par in (0, 1):
            rs = stable_mode_resonances(manifold, k, par, search, theta, h=h, dense=False)
            if refine and len(rs):
                rs.omega = np.array([refine_resonance(manifold, k, par, w, scaling, h0=h / 2, levels=2)[0]
                                     for w in rs.omega])
            inside = (rs.omega.real >= R) & (rs.omega.real <= R + box_width) & (rs.omega.imag >= -beta)
            sets.append(ResonanceSet(rs.omega[inside], rs.k[inside], rs.parity[inside], rs.residual[inside],
                                     theta, rs.flagged))
    res = ResonanceSet.concat(sets)
    return CountResult(float(R), float(beta), int(res.multiplicity().sum()) if len(res) else 0, res, k_range[1])
