"""Warped-product manifolds M = R_r x S^{d-1} with metric dr^2 + alpha(r)^2 g0.

Profiles are even, piecewise polynomial in |r|, stored segment-wise as
Chebyshev series for alpha, alpha' and alpha''.  Beyond the end radius C the
closed-form branch alpha = |r| is used.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as cheb
from scipy import special

FAMILIES = ("cylindrical", "degenerate", "neck", "custom")

_CHEB_NODES = 48
_PIECE = 0.5  # max width of a Chebyshev segment outside the core


def smoothstep(x):
    """Degree-11 C^5 smoothstep clipped to [0, 1].

    This is the regularized incomplete beta I_x(6, 6), evaluated through
    scipy to avoid the cancellation of its power form.
    """
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return special.betainc(6.0, 6.0, x)


@dataclass(frozen=True, eq=False)
class Profile:
    """Radius function alpha(r) of the warped product.

    ``breaks`` holds the segment boundaries in |r| (first 0, last the end
    radius), ``coeffs`` has shape (nseg, 3, ncoef): Chebyshev coefficients of
    alpha, alpha', alpha'' on each segment mapped to [-1, 1].  The first
    segment is evaluated from the power coefficients ``core`` instead, which
    keeps high-order zeros of alpha' at r = 0 exact.
    """

    family: str
    params: tuple
    breaks: np.ndarray
    coeffs: np.ndarray
    core: np.ndarray
    end_radius: float = field(init=False)

    def __post_init__(self):
        breaks = np.ascontiguousarray(self.breaks, dtype=float)
        coeffs = np.ascontiguousarray(self.coeffs, dtype=float)
        if breaks.ndim != 1 or breaks[0] != 0.0 or np.any(np.diff(breaks) <= 0):
            raise ValueError("breaks must start at 0 and increase strictly")
        if coeffs.shape[:2] != (breaks.size - 1, 3):
            raise ValueError("coeffs must have shape (nseg, 3, ncoef)")
        core = np.ascontiguousarray(self.core, dtype=float)
        breaks.setflags(write=False)
        coeffs.setflags(write=False)
        core.setflags(write=False)
        object.__setattr__(self, "core", core)
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "end_radius", float(breaks[-1]))

    @property
    def param_dict(self) -> dict:
        return dict(self.params)

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.family.encode())
        h.update(repr(self.params).encode())
        h.update(self.breaks.tobytes())
        h.update(self.coeffs.tobytes())
        h.update(self.core.tobytes())
        return h.hexdigest()[:16]

    def __call__(self, r):
        """Return (alpha, alpha', alpha'') at r (scalar or array)."""
        r0 = np.asarray(r, dtype=float)
        r = np.atleast_1d(r0)
        s = np.abs(r)
        sgn = np.where(r < 0, -1.0, 1.0)
        a = s.copy()
        d1 = sgn.copy()
        d2 = np.zeros_like(s)
        inner = s < self.end_radius
        if np.any(inner):
            si = s[inner]
            seg = np.clip(np.searchsorted(self.breaks, si, side="right") - 1, 0, len(self.breaks) - 2)
            for i in np.unique(seg):
                m = seg == i
                lo, hi = self.breaks[i], self.breaks[i + 1]
                idx = np.flatnonzero(inner)[m]
                if i == 0:
                    g = np.polynomial.Polynomial(self.core)
                    a[idx] = g(si[m])
                    d1[idx] = sgn[idx] * g.deriv()(si[m])
                    d2[idx] = g.deriv(2)(si[m])
                    continue
                x = (2.0 * si[m] - lo - hi) / (hi - lo)
                a[idx] = cheb.chebval(x, self.coeffs[i, 0])
                d1[idx] = sgn[idx] * cheb.chebval(x, self.coeffs[i, 1])
                d2[idx] = cheb.chebval(x, self.coeffs[i, 2])
        if r0.ndim == 0:
            return float(a[0]), float(d1[0]), float(d2[0])
        return a, d1, d2

    def alpha(self, r):
        return self(r)[0]

    def integral_power(self, lo: float, hi: float, power: int) -> float:
        """Integral of alpha^power over [lo, hi], exact up to rounding."""
        if hi < lo:
            raise ValueError("hi < lo")

        def prim(x):  # integral over [0, x] for x >= 0
            total = 0.0
            for i in range(len(self.breaks) - 1):
                a, b = self.breaks[i], self.breaks[i + 1]
                if x <= a:
                    break
                top = min(x, b)
                series = cheb.Chebyshev(self.coeffs[i, 0], domain=[a, b]) ** power
                anti = series.integ(lbnd=a)
                total += anti(top)
            if x > self.end_radius:
                c = self.end_radius
                total += (x ** (power + 1) - c ** (power + 1)) / (power + 1)
            return total

        def signed(x):
            return prim(x) if x >= 0 else -prim(-x)

        return signed(hi) - signed(lo)


def _cheb_fit(func, lo: float, hi: float, n: int = _CHEB_NODES) -> np.ndarray:
    """Chebyshev coefficients of a polynomial on [lo, hi] by interpolation."""
    x = np.cos(np.pi * (np.arange(n) + 0.5) / n)
    r = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    c = cheb.chebfit(x, func(r), n - 1)
    # drop the rounding-noise tail
    tail = np.abs(c) > 2e-14 * max(1.0, np.abs(c).max())
    keep = np.flatnonzero(tail).max() + 1 if tail.any() else 1
    return c[:keep]


def _segment_triplet(dcoef: np.ndarray, lo: float, hi: float, value_at_lo: float) -> list[np.ndarray]:
    """From Chebyshev coefficients of alpha' build those of alpha, alpha', alpha''."""
    half = 0.5 * (hi - lo)
    a = cheb.chebint(dcoef, scl=half)
    a[0] += value_at_lo - cheb.chebval(-1.0, a)
    d2 = cheb.chebder(dcoef, scl=1.0 / half) if dcoef.size > 1 else np.zeros(1)
    return [a, dcoef, d2]


def build_blended_profile(
    core: np.ndarray,
    core_radius: float,
    blend_width: float,
    end_radius: float,
    family: str = "custom",
    params: tuple = (),
) -> Profile:
    """Glue a core polynomial to the Euclidean end alpha = |r|.

    On [0, r_c] alpha is the core polynomial (power coefficients ``core``).
    On [r_c, r_c + w] the derivative blends from the core slope to a ramp q,
    and on [r_c + w, C] alpha' = q.  The ramp q = kappa + (1 - kappa) S(y)
    rises (or falls) to slope 1 at C with all derivatives matched, and kappa
    is fixed so that alpha(C) = C.
    """
    core = np.asarray(core, dtype=float)
    rc, w, C = float(core_radius), float(blend_width), float(end_radius)
    if not (0.0 < rc and 0.0 < w and rc + w <= C + 1e-12):
        raise ValueError("need 0 < core_radius, 0 < blend_width, core_radius + blend_width <= end_radius")
    w = min(w, C - rc)
    g = np.polynomial.Polynomial(core)
    dg = g.deriv()

    def ramp(r, kappa):
        return kappa + (1.0 - kappa) * smoothstep((r - rc) / (C - rc))

    def slope(r, kappa):
        r = np.asarray(r, dtype=float)
        u = smoothstep((r - rc) / w)
        return np.where(r < rc + w, (1.0 - u) * dg(r) + u * ramp(r, kappa), ramp(r, kappa))

    # short pieces keep the per-segment series short (cheap to evaluate)
    edges = [rc]
    for lo, hi in ((rc, rc + w), (rc + w, C)):
        if hi > lo + 1e-12:
            n = int(math.ceil((hi - lo) / _PIECE))
            edges.extend(np.linspace(lo, hi, n + 1)[1:])

    def pieces(kappa):
        segs = [(0.0, rc, _segment_triplet(_cheb_fit(dg, 0.0, rc), 0.0, rc, g(0.0)))]
        end_val = g(rc)
        for lo, hi in zip(edges[:-1], edges[1:]):
            trip = _segment_triplet(_cheb_fit(lambda r: slope(r, kappa), lo, hi), lo, hi, end_val)
            segs.append((lo, hi, trip))
            end_val = cheb.chebval(1.0, trip[0])
        return segs, end_val

    _, e0 = pieces(0.0)
    _, e1 = pieces(1.0)
    kappa = (C - e0) / (e1 - e0)
    segs, _ = pieces(kappa)
    # exact polynomial core: interpolate g itself rather than integrating g'
    segs[0] = (0.0, rc, [_cheb_fit(g, 0.0, rc), segs[0][2][1], segs[0][2][2]])
    ncoef = max(c.size for _, _, trip in segs for c in trip)
    coeffs = np.zeros((len(segs), 3, ncoef))
    for i, (_, _, trip) in enumerate(segs):
        for j, c in enumerate(trip):
            coeffs[i, j, : c.size] = c
    breaks = np.array([segs[0][0]] + [s[1] for s in segs])
    params = tuple(params) + (("kappa", float(kappa)),)
    return Profile(family=family, params=params, breaks=breaks, coeffs=coeffs, core=core)


def make_builtin_profile(tag: str, **params) -> Profile:
    """Built-in families.

    cylindrical: alpha = 1 on |r| <= 2, |r| on |r| >= 4.
    degenerate(n): alpha = 1 + r^(2n)/2 on |r| <= 1, |r| on |r| >= 4.
    neck(a): alpha = 1 + a r^2/2 near 0 (hyperbolic closed orbit at r = 0),
    |r| on |r| >= end_radius (default 3).
    """
    if tag == "cylindrical":
        if params:
            raise ValueError(f"cylindrical takes no parameters, got {sorted(params)}")
        prof = build_blended_profile(np.array([1.0]), 2.0, 2.0, 4.0, "cylindrical", ())
    elif tag == "degenerate":
        n = params.pop("n", None)
        if params:
            raise ValueError(f"unknown parameters {sorted(params)}")
        if n is None or int(n) != n or n < 2:
            raise ValueError("degenerate profile needs integer n >= 2")
        n = int(n)
        core = np.zeros(2 * n + 1)
        core[0], core[2 * n] = 1.0, 0.5
        prof = build_blended_profile(core, 1.0, 0.2, 4.0, "degenerate", (("n", n),))
    elif tag == "neck":
        a = float(params.pop("a", 1.0))
        C = float(params.pop("end_radius", 3.0))
        rc = float(params.pop("core_radius", 0.5))
        if params:
            raise ValueError(f"unknown parameters {sorted(params)}")
        if a <= 0:
            raise ValueError("neck curvature a must be positive")
        prof = build_blended_profile(
            np.array([1.0, 0.0, 0.5 * a]), rc, 0.25, C, "neck",
            (("a", a), ("core_radius", rc), ("end_radius", C)),
        )
    else:
        raise ValueError(f"unknown profile family {tag!r}; expected one of {FAMILIES[:3]} or use make_custom_profile")
    _assert_builtin_sign(prof)
    return prof


def make_custom_profile(core, core_radius: float, blend_width: float, end_radius: float) -> Profile:
    """User-supplied core polynomial (power coefficients in r), blended into |r|.

    No sign-condition check here; run validate_profile.
    """
    core = tuple(float(c) for c in core)
    params = (("core", core), ("core_radius", float(core_radius)),
              ("blend_width", float(blend_width)), ("end_radius", float(end_radius)))
    return build_blended_profile(np.array(core), core_radius, blend_width, end_radius, "custom", params)


def _assert_builtin_sign(prof: Profile) -> None:
    r = np.linspace(1e-6, prof.end_radius, 40001)
    a, d1, _ = prof(r)
    if np.any(a <= 0) or np.any(d1 < -1e-13):
        raise RuntimeError(f"blend construction for {prof.family} violates positivity or the sign condition")
    # strictness is checked away from the high-order zeros where rounding dominates
    if prof.family == "cylindrical" and np.any(d1[r > 2.05] <= 0):
        raise RuntimeError("cylindrical blend is not strictly increasing beyond r = 2")
    if prof.family == "degenerate" and np.any(d1[r > 0.05] <= 0):
        raise RuntimeError("degenerate blend is not strictly increasing for r > 0")


@dataclass(frozen=True, eq=False)
class Manifold:
    """Profile plus dimension, Euclidean radius r0 and ball radius r1 (B = {|r| <= r1})."""

    profile: Profile
    d: int = 2
    r0: float | None = None
    r1: float | None = None

    def __post_init__(self):
        C = self.profile.end_radius
        r0 = C if self.r0 is None else float(self.r0)
        r1 = r0 + 1.0 if self.r1 is None else float(self.r1)
        object.__setattr__(self, "r0", r0)
        object.__setattr__(self, "r1", r1)
        if int(self.d) != self.d or self.d < 2:
            raise ValueError("dimension d must be an integer >= 2")
        if not (r1 > r0 >= C > 0):
            raise ValueError(f"need r1 > r0 >= C > 0, got r1={r1}, r0={r0}, C={C}")

    @property
    def digest(self) -> str:
        return hashlib.sha256(f"{self.profile.digest}|{self.d}|{self.r0!r}|{self.r1!r}".encode()).hexdigest()[:16]

    def describe(self) -> dict:
        return {"family": self.profile.family, "params": {k: v for k, v in self.profile.params if k != "kappa"},
                "d": self.d, "r0": self.r0, "r1": self.r1}


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    witness: float | None
    residual: float


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def lines(self) -> list[str]:
        return [f"{c.name:10s} {'pass' if c.passed else 'FAIL'}  residual={c.residual:.3e}"
                + ("" if c.witness is None else f"  witness r={c.witness:.6g}") for c in self.checks]


def validate_profile(manifold: Manifold, step: float = 1e-3) -> ValidationReport:
    """Check positivity, end condition, sign condition and C^2 consistency."""
    prof = manifold.profile
    C = prof.end_radius
    span = max(manifold.r1, C) + 1.0
    r = np.arange(-span, span + step / 2, step)
    a, d1, d2 = prof(r)
    checks = []

    i = int(np.argmin(a))
    checks.append(CheckResult("positive", bool(a[i] > 0), float(r[i]), float(a[i])))

    ends = np.abs(r) >= C
    dev = np.maximum.reduce([np.abs(a - np.abs(r)), np.abs(d1 - np.sign(r)), np.abs(d2)]) * ends
    j = int(np.argmax(dev))
    checks.append(CheckResult("end", bool(dev[j] <= 1e-12), float(r[j]) if dev[j] > 0 else None, float(dev[j])))

    viol = np.maximum(-np.sign(r) * d1, 0.0)
    viol[r == 0] = 0.0
    bad = np.flatnonzero(viol > 1e-13)
    if bad.size:
        k = bad[np.argmin(np.abs(r[bad]))]
        checks.append(CheckResult("sign", False, float(r[k]), float(viol.max())))
    else:
        checks.append(CheckResult("sign", True, None, float(viol.max())))

    # C^2: centred differences converge to alpha', alpha'' at second order
    res = []
    for h in (1e-3, 5e-4):
        ap, _, _ = prof(r + h)
        am, _, _ = prof(r - h)
        e1 = np.abs((ap - am) / (2 * h) - d1)
        e2 = np.abs((ap - 2 * a + am) / h**2 - d2)
        res.append((e1.max(), e2.max(), float(r[np.argmax(e1)])))
    (e1a, e2a, wit), (e1b, e2b, _) = res
    ok1 = e1b <= 1e-9 or e1b <= 0.3 * e1a
    ok2 = e2b <= 1e-5 or e2b <= 0.3 * e2a
    checks.append(CheckResult("smooth", bool(ok1 and ok2), wit, float(max(e1b, e2b))))
    return ValidationReport(tuple(checks))


def critical_set(profile: Profile, search_box: tuple[float, float] | None = None,
                 tol: float = 1e-10, step: float = 1e-4) -> list[tuple[float, float]]:
    """Maximal closed intervals where alpha' vanishes.

    Runs with |alpha'| <= tol on the grid are classified with the segment
    structure: the part of a run covered by segments where alpha' vanishes
    identically is kept as an interval, otherwise the run surrounds an
    isolated (possibly high order) zero and is collapsed onto it.
    """
    C = profile.end_radius
    lo, hi = (-C, C) if search_box is None else search_box
    if lo < -C - 1e-12 or hi > C + 1e-12:
        raise ValueError("search_box must lie inside [-C, C]")
    n = int(round((hi - lo) / step))
    r = np.linspace(lo, hi, n + 1)
    _, d1, _ = profile(r)
    flat = np.abs(d1) <= tol
    zero_segs = _zero_derivative_segments(profile)
    out = []
    i = 0
    while i < r.size:
        if not flat[i]:
            i += 1
            continue
        j = i
        while j + 1 < r.size and flat[j + 1]:
            j += 1
        a, b = r[i], r[j]
        covered = [(max(a, lo_z), min(b, hi_z)) for lo_z, hi_z in zero_segs if lo_z <= b and hi_z >= a]
        if covered:
            out.extend((float(x), float(y)) for x, y in covered)
        elif b - a < step / 2:
            out.append((float(a), float(b)))
        else:
            out.append(_collapse_root(profile, a - step, b + step))
        i = j + 1
    return out


def _zero_derivative_segments(profile: Profile) -> list[tuple[float, float]]:
    segs = []
    for i in range(len(profile.breaks) - 1):
        c = profile.coeffs[i, 1]
        if np.all(np.abs(c) <= 1e-14):
            a, b = profile.breaks[i], profile.breaks[i + 1]
            segs.append((-b, -a))
            segs.append((a, b))
    segs.sort()
    merged: list[tuple[float, float]] = []
    for a, b in segs:
        if merged and a <= merged[-1][1] + 1e-12:
            merged[-1] = (merged[-1][0], max(b, merged[-1][1]))
        else:
            merged.append((a, b))
    return merged


def _collapse_root(profile: Profile, a: float, b: float) -> tuple[float, float]:
    fa = profile(a)[1]
    for _ in range(200):
        m = 0.5 * (a + b)
        fm = profile(m)[1]
        if fm == 0.0:
            return (m, m)
        if (fm > 0) == (fa > 0):
            a, fa = m, fm
        else:
            b = m
    m = 0.5 * (a + b)
    return (m, m)


def max_critical_radius(profile: Profile, step: float = 1e-4) -> float:
    """Largest |r| on the critical set plus ten grid steps (early-escape threshold)."""
    ivs = critical_set(profile, step=step)
    if not ivs:
        return 0.0
    return max(max(abs(a), abs(b)) for a, b in ivs) + 10 * step


def sphere_volume(d: int) -> float:
    """Volume of the round unit sphere S^{d-1}."""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def liouville_weight(manifold: Manifold, r):
    """Radial Liouville density alpha(r)^{d-1}."""
    return manifold.profile.alpha(r) ** (manifold.d - 1)


def liouville_total(manifold: Manifold, r_ball: float | None = None) -> float:
    """Liouville mass of the unit cosphere bundle over {|r| <= r_ball}."""
    rb = manifold.r1 if r_ball is None else float(r_ball)
    vol = sphere_volume(manifold.d)
    return vol * vol * manifold.profile.integral_power(-rb, rb, manifold.d - 1)
