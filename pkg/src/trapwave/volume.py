"""Monte Carlo estimates of the trapped volume V(t) and rate fits.

V(t) is the Liouville mass of unit covectors over B = {|r| <= r_ball} whose
geodesic is still over B after time t.  Two estimators:

direct   plain Liouville sampling, indicator of forward exit time > t.
focused  defensive-mixture importance sampling of the midpoint set
         {x in B : exit times forward and backward both > t/2}, which has the
         same measure as T(t) (flow invariance plus convexity of B) and
         concentrates near the trapped set, where the rare events live.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .flow import exit_times, flow_arrays, log_norm_paths
from .geometry import Manifold, critical_set, liouville_total

CHUNK = 1 << 15
Z95 = 1.959963984540054


@dataclass(frozen=True)
class VolumeCurve:
    t: np.ndarray
    V: np.ndarray
    ci: np.ndarray
    n: int
    seed: int
    manifold: dict
    method: str = "direct"
    r_ball: float = float("nan")
    total: float = float("nan")

    def to_csv(self, path: str | Path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["t", "V_hat", "ci", "n"])
            for t, v, c in zip(self.t, self.V, self.ci):
                w.writerow([repr(float(t)), repr(float(v)), repr(float(c)), self.n])

    def at(self, t):
        """Log-linear interpolation of V-hat at t (must lie inside the grid)."""
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t[0] - 1e-12) or np.any(t > self.t[-1] + 1e-12):
            raise ValueError(f"curve covers [{self.t[0]}, {self.t[-1]}], requested {t.min()}..{t.max()}")
        if np.any(self.V <= 0):
            raise ValueError("curve has nonpositive estimates; cannot interpolate in log scale")
        return np.exp(np.interp(t, self.t, np.log(self.V)))


@dataclass(frozen=True)
class FitResult:
    value: float
    stderr: float
    window: tuple[float, float]
    residual_var: float


@dataclass(frozen=True)
class RateFit:
    gamma: float
    gamma_stderr: float
    regime: str  # "exponential" or "power-law"
    exponential: FitResult
    power_law: FitResult
    lambda_max: float = float("nan")
    lambda_stderr: float = float("nan")
    lambda_window: tuple[float, float] = (float("nan"), float("nan"))


# ---------------------------------------------------------------- sampling

def _rho_density(d: int, rho):
    a = 0.5 * (d - 1)
    return stats.beta.pdf(0.5 * (1.0 + np.asarray(rho)), a, a) * 0.5


def _sample_rho(d: int, n: int, rng) -> np.ndarray:
    a = 0.5 * (d - 1)
    return 2.0 * rng.beta(a, a, size=n) - 1.0


def _sample_r(manifold: Manifold, n: int, rng, rb: float) -> np.ndarray:
    """Rejection sampling from alpha(r)^{d-1} on [-rb, rb]."""
    prof = manifold.profile
    p = manifold.d - 1
    grid = np.linspace(-rb, rb, 4001)
    bound = 1.05 * float(np.max(prof.alpha(grid) ** p))
    out = np.empty(0)
    while out.size < n:
        m = max(2 * (n - out.size), 64)
        r = rng.uniform(-rb, rb, m)
        u = rng.uniform(0.0, bound, m)
        out = np.concatenate([out, r[u < prof.alpha(r) ** p]])
    return out[:n]


def sample_liouville(manifold: Manifold, n: int, rng, r_ball: float | None = None):
    """(r, rho, p0) distributed as normalised Liouville measure over {|r| <= r_ball}."""
    rb = manifold.r1 if r_ball is None else float(r_ball)
    r = _sample_r(manifold, n, rng, rb)
    rho = _sample_rho(manifold.d, n, rng)
    a = manifold.profile.alpha(r)
    return r, rho, a * a * (1.0 - rho * rho)


@dataclass(frozen=True)
class FocusedSampler:
    """Defensive mixture q = w0 f + (1 - w0) * mean of uniform boxes, per coordinate.

    Boxes in r surround the critical intervals at geometric distances; boxes in
    rho are centred at 0.  The weight f / q is bounded by 1 / w0.
    """

    manifold: Manifold
    r_ball: float
    r_scales: np.ndarray
    rho_scales: np.ndarray
    base_weight: float = 0.2
    intervals: tuple = field(default=())
    z_r: float = 1.0

    @classmethod
    def build(cls, manifold: Manifold, r_ball: float | None = None, r_min: float = 1e-8,
              rho_min: float = 1e-10, per_decade: int = 2, base_weight: float = 0.2) -> "FocusedSampler":
        rb = manifold.r1 if r_ball is None else float(r_ball)
        ivs = critical_set(manifold.profile)
        ivs = tuple((max(a, -rb), min(b, rb)) for a, b in ivs if b >= -rb and a <= rb)
        n_r = int(math.ceil(per_decade * math.log10(rb / r_min))) + 1
        n_p = int(math.ceil(per_decade * math.log10(1.0 / rho_min))) + 1
        z = manifold.profile.integral_power(-rb, rb, manifold.d - 1)
        return cls(manifold, rb, np.geomspace(rb, r_min, n_r), np.geomspace(1.0, rho_min, n_p),
                   base_weight, ivs, z)

    def _r_boxes(self):
        boxes = []
        for lo, hi in (self.intervals or ((0.0, 0.0),)):
            for a in self.r_scales:
                boxes.append((max(lo - a, -self.r_ball), min(hi + a, self.r_ball)))
        return np.array(boxes)

    def sample(self, n: int, rng):
        d = self.manifold.d
        boxes = self._r_boxes()
        w0 = self.base_weight
        # r coordinate
        comp = rng.integers(0, boxes.shape[0], n)
        use_base = rng.uniform(size=n) < w0
        r = rng.uniform(boxes[comp, 0], boxes[comp, 1])
        nb = int(use_base.sum())
        r[use_base] = _sample_r(self.manifold, nb, rng, self.r_ball)
        # rho coordinate
        comp_p = rng.integers(0, self.rho_scales.size, n)
        use_base_p = rng.uniform(size=n) < w0
        rho = rng.uniform(-self.rho_scales[comp_p], self.rho_scales[comp_p])
        nbp = int(use_base_p.sum())
        rho[use_base_p] = _sample_rho(d, nbp, rng)
        return r, rho

    def weights(self, r, rho):
        """Liouville density over mixture density, normalised so E_q[w] = 1."""
        d = self.manifold.d
        w0 = self.base_weight
        f_r = self.manifold.profile.alpha(r) ** (d - 1) / self.z_r
        boxes = self._r_boxes()
        inside = (r[:, None] >= boxes[None, :, 0]) & (r[:, None] <= boxes[None, :, 1])
        q_r = w0 * f_r + (1 - w0) * np.mean(inside / (boxes[:, 1] - boxes[:, 0])[None, :], axis=1)
        f_p = _rho_density(d, rho)
        b = self.rho_scales
        q_p = w0 * f_p + (1 - w0) * np.mean((np.abs(rho)[:, None] <= b[None, :]) / (2 * b)[None, :], axis=1)
        return (f_r / q_r) * (f_p / q_p)


# ---------------------------------------------------------------- estimation

def _chunk_direct(args):
    manifold, rb, t_grid, seed, idx, size = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(idx,)))
    r, rho, p0 = sample_liouville(manifold, size, rng, rb)
    tau = exit_times(manifold.profile, r, rho, p0, rb, float(t_grid[-1]), bins=t_grid)
    return tau


def _chunk_focused(args):
    sampler, half_grid, seed, idx, size = args
    manifold = sampler.manifold
    t_half = float(half_grid[-1])
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(idx,)))
    r, rho = sampler.sample(size, rng)
    a = manifold.profile.alpha(r)
    p0 = a * a * (1.0 - rho * rho)
    w = sampler.weights(r, rho)
    fwd = exit_times(manifold.profile, r, rho, p0, sampler.r_ball, t_half, bins=half_grid)
    bwd = exit_times(manifold.profile, r, -rho, p0, sampler.r_ball, t_half, bins=half_grid)
    return np.minimum(fwd, bwd), w, r, rho, p0


def _map(func, jobs, workers: int):
    if workers <= 1:
        return [func(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(func, jobs))


def _chunks(n: int):
    out = []
    i = 0
    while n > 0:
        size = min(CHUNK, n)
        out.append((i, size))
        n -= size
        i += 1
    return out


def estimate_volume_curve(manifold: Manifold, t_grid, n_samples: int, seed: int,
                          method: str = "direct", r_ball: float | None = None,
                          workers: int = 1, sampler: FocusedSampler | None = None) -> VolumeCurve:
    """Monte Carlo V-hat(t) on t_grid with 95% confidence half-widths."""
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or np.any(t_grid < 0) or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be nonnegative and strictly increasing")
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    rb = manifold.r1 if r_ball is None else float(r_ball)
    total = liouville_total(manifold, rb)
    t_max = float(t_grid[-1])
    if method == "direct":
        jobs = [(manifold, rb, t_grid, seed, i, s) for i, s in _chunks(n_samples)]
        tau = np.concatenate(_map(_chunk_direct, jobs, workers))
        _check_failures(tau)
        frac = (tau[None, :] > t_grid[:, None]).mean(axis=1)
        V = total * frac
        ci = Z95 * total * np.sqrt(frac * (1 - frac) / n_samples)
    elif method == "focused":
        sampler = sampler or FocusedSampler.build(manifold, rb)
        jobs = [(sampler, 0.5 * t_grid, seed, i, s) for i, s in _chunks(n_samples)]
        parts = _map(_chunk_focused, jobs, workers)
        m = np.concatenate([p[0] for p in parts])
        w = np.concatenate([p[1] for p in parts])
        _check_failures(m)
        hit = (2.0 * m[None, :] > t_grid[:, None]) * w[None, :]
        V = total * hit.mean(axis=1)
        ci = Z95 * total * hit.std(axis=1, ddof=1) / math.sqrt(n_samples)
    else:
        raise ValueError(f"unknown method {method!r}")
    return VolumeCurve(t_grid, V, ci, int(n_samples), int(seed), manifold.describe(), method, rb, total)


def _check_failures(tau: np.ndarray) -> None:
    bad = np.isnan(tau).mean()
    if bad > 1e-4:
        raise RuntimeError(f"integration failed on {100 * bad:.4f}% of samples")


def midpoint_trapped_samples(manifold: Manifold, t: float, n_samples: int, seed: int,
                             r_ball: float | None = None, sampler: FocusedSampler | None = None):
    """Focused samples y with both exit times > t/2, i.e. midpoints of T(t) orbits.

    Returns (r, rho, p0) of the retained points.
    """
    rb = manifold.r1 if r_ball is None else float(r_ball)
    sampler = sampler or FocusedSampler.build(manifold, rb)
    parts = [_chunk_focused((sampler, np.array([0.5 * t]), seed, i, s)) for i, s in _chunks(n_samples)]
    m = np.concatenate([p[0] for p in parts])
    keep = m > 0.5 * t
    r = np.concatenate([p[2] for p in parts])[keep]
    rho = np.concatenate([p[3] for p in parts])[keep]
    p0 = np.concatenate([p[4] for p in parts])[keep]
    return r, rho, p0


# ---------------------------------------------------------------- fits

def _wls(x, y, sigma):
    sigma = np.maximum(np.asarray(sigma, dtype=float), 1e-12 * np.maximum(np.abs(y), 1.0))
    w = 1.0 / sigma**2
    X = np.column_stack([np.ones_like(x), x])
    A = X.T @ (w[:, None] * X)
    coef = np.linalg.solve(A, X.T @ (w * y))
    resid = y - X @ coef
    dof = max(len(x) - 2, 1)
    chi2 = float(np.sum(w * resid**2) / dof)
    cov = np.linalg.inv(A) * max(chi2, 1e-300)
    return coef, np.sqrt(np.diag(cov)), float(np.var(resid))


def _window(curve: VolumeCurve, window):
    lo, hi = (curve.t[0], curve.t[-1]) if window is None else window
    m = (curve.t >= lo - 1e-12) & (curve.t <= hi + 1e-12)
    if m.sum() < 3:
        raise ValueError("fewer than three grid points in the fit window")
    if np.any(curve.V[m] <= 0):
        raise ValueError("nonpositive estimates in the fit window")
    return m, (float(curve.t[m][0]), float(curve.t[m][-1]))


def fit_power_law(curve: VolumeCurve, window=None) -> FitResult:
    """Slope of log V-hat against log t (weighted by the relative CI)."""
    m, win = _window(curve, window)
    t, V, ci = curve.t[m], curve.V[m], curve.ci[m]
    if np.any(t <= 0):
        raise ValueError("power-law window must exclude t = 0")
    coef, se, rv = _wls(np.log(t), np.log(V), ci / Z95 / V)
    return FitResult(float(coef[1]), float(se[1]), win, rv)


def fit_exponential(curve: VolumeCurve, window=None) -> FitResult:
    """Minus the slope of log V-hat against t."""
    m, win = _window(curve, window)
    t, V, ci = curve.t[m], curve.V[m], curve.ci[m]
    coef, se, rv = _wls(t, np.log(V), ci / Z95 / V)
    return FitResult(float(-coef[1]), float(se[1]), win, rv)


def fit_escape_rate(curve: VolumeCurve, window=None) -> RateFit:
    """Escape rate with a power-law versus exponential model comparison.

    gamma-hat is reported as 0 when the power-law regression leaves the smaller
    residual variance on the window (polynomial decay has zero exponential rate).
    """
    ex = fit_exponential(curve, window)
    m, _ = _window(curve, window)
    if np.all(curve.t[m] > 0):
        pl = fit_power_law(curve, window)
    else:
        pl = FitResult(float("nan"), float("nan"), ex.window, float("inf"))
    if pl.residual_var < ex.residual_var:
        return RateFit(0.0, 0.0, "power-law", ex, pl)
    return RateFit(ex.value, ex.stderr, "exponential", ex, pl)


@dataclass(frozen=True)
class LambdaFit:
    value: float
    stderr: float
    window: tuple[float, float]
    n_trapped: int
    t: np.ndarray
    max_log_norm: np.ndarray


def estimate_lambda_max(manifold: Manifold, t_fit: float, n_samples: int, seed: int,
                        r_ball: float | None = None, n_times: int = 41) -> LambdaFit:
    """Slope of max over trapped samples of log||J(t)|| on [t_fit/2, t_fit].

    Trapped starting points are produced by flowing focused midpoints of
    T(t_fit) back by t_fit/2, so every retained orbit stays over B on [0, t_fit].
    """
    if t_fit < 10:
        raise ValueError("t_fit must be at least 10")
    r, rho, p0 = midpoint_trapped_samples(manifold, t_fit, n_samples, seed, r_ball)
    if r.size == 0:
        raise RuntimeError("no trapped samples found; increase n_samples")
    x_r, x_rho = flow_arrays(manifold.profile, r, rho, p0, -0.5 * t_fit)
    tgrid = np.linspace(0.0, t_fit, n_times)
    logs = log_norm_paths(manifold.profile, x_r, x_rho, p0, tgrid)
    top = logs.max(axis=0)
    late = tgrid >= 0.5 * t_fit - 1e-12
    X = np.column_stack([np.ones(late.sum()), tgrid[late]])
    coef, res, *_ = np.linalg.lstsq(X, top[late], rcond=None)
    resid = top[late] - X @ coef
    dof = max(late.sum() - 2, 1)
    s2 = float(resid @ resid) / dof
    se = math.sqrt(s2 * np.linalg.inv(X.T @ X)[1, 1])
    return LambdaFit(float(coef[1]), se, (0.5 * t_fit, float(t_fit)), int(r.size), tgrid, top)


@dataclass(frozen=True)
class IslandExtent:
    t: np.ndarray
    max_r0: np.ndarray
    max_rho0: np.ndarray
    n_kept: np.ndarray
    tau: float


def island_extent(manifold: Manifold, t_grid, tau: float, n_samples: int, seed: int,
                  r_floor: float = 1e-7, rho_floor: float = 1e-12) -> IslandExtent:
    """Largest r(0) and rho(0) among outgoing unit states that stay in |r| <= tau up to t.

    Samples r(0) in [0, tau] and rho(0) in [0, 1] log-uniformly (plus exact zeros
    for a quarter of each), keeps those with p0 >= 1 - tau and exit time from
    {|r| <= tau} beyond t, and reports the maxima per grid time.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xB1,)))
    r0 = np.exp(rng.uniform(math.log(r_floor), math.log(tau), n_samples))
    rho0 = np.exp(rng.uniform(math.log(rho_floor), 0.0, n_samples))
    r0[rng.uniform(size=n_samples) < 0.25] = 0.0
    rho0[rng.uniform(size=n_samples) < 0.25] = 0.0
    a = manifold.profile.alpha(r0)
    p0 = a * a * (1.0 - rho0 * rho0)
    ok = p0 >= 1.0 - tau
    r0, rho0, p0 = r0[ok], rho0[ok], p0[ok]
    ex = exit_times(manifold.profile, r0, rho0, p0, tau, float(t_grid[-1]), bins=t_grid)
    max_r = np.empty(t_grid.size)
    max_p = np.empty(t_grid.size)
    kept = np.empty(t_grid.size, dtype=int)
    for i, t in enumerate(t_grid):
        m = ex > t
        kept[i] = int(m.sum())
        max_r[i] = r0[m].max() if kept[i] else 0.0
        max_p[i] = rho0[m].max() if kept[i] else 0.0
    return IslandExtent(t_grid, max_r, max_p, kept, float(tau))


def loglog_slope(x, y) -> tuple[float, float]:
    """Least-squares slope of log y on log x with its standard error."""
    X = np.column_stack([np.ones(len(x)), np.log(x)])
    yy = np.log(y)
    coef, *_ = np.linalg.lstsq(X, yy, rcond=None)
    resid = yy - X @ coef
    s2 = float(resid @ resid) / max(len(x) - 2, 1)
    return float(coef[1]), math.sqrt(s2 * np.linalg.inv(X.T @ X)[1, 1])
