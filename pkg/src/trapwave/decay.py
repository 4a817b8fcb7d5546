"""Random waves on the frequency window: decay experiment and concentration checks.

Random states are uniform on the unit sphere of a complex coefficient space
(normalized complex Gaussians).  Every trial draws from its own counter-based
substream, so a trial can be regenerated without the others.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import svg
from .exponents import decay_envelope, ehrenfest_time
from .geometry import Manifold
from .spectral import Cutoff, PropagatorPlan, WindowEvolution, build_plan, evolve_window
from .volume import VolumeCurve


# ---------------------------------------------------------------- sampling


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(trial),)))


@dataclass(frozen=True)
class RandomStates:
    """count x N complex coefficient vectors of unit norm; row i is trial start + i."""

    a: np.ndarray
    seed: int
    start: int = 0

    @property
    def N(self) -> int:
        return self.a.shape[1]

    def __len__(self) -> int:
        return self.a.shape[0]


def sample_sphere(N: int, seed: int, count: int, start: int = 0) -> RandomStates:
    if N < 1:
        raise ValueError("N must be at least 1")
    out = np.empty((count, N), dtype=complex)
    for i in range(count):
        z = trial_rng(seed, start + i).standard_normal((2, N))
        v = z[0] + 1j * z[1]
        out[i] = v / np.linalg.norm(v)
    return RandomStates(out, int(seed), int(start))


# ---------------------------------------------------------------- decay experiment


@dataclass
class DecayCurve:
    """Per-trial norms ||psi U(t) psi u_R|| on a time grid."""

    t: np.ndarray
    norms: np.ndarray  # trials x times
    R: float
    seed: int
    eps_prime: float
    hs_normalized: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def n_trials(self) -> int:
        return self.norms.shape[0]

    def quantile(self, q: float) -> np.ndarray:
        return np.quantile(self.norms, q, axis=0)

    @property
    def median(self) -> np.ndarray:
        return self.quantile(0.5)

    def to_csv(self, path: str | Path, envelope=None, header: str | None = None) -> None:
        env = np.full(self.t.size, np.nan) if envelope is None else np.asarray(envelope, dtype=float)
        q50, q90, q99 = self.quantile(0.5), self.quantile(0.9), self.quantile(0.99)
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["t", "q50", "q90", "q99", "envelope"])
            for row in zip(self.t, q50, q90, q99, env):
                w.writerow([repr(float(x)) for x in row])

    def dump_trials(self, path: str | Path) -> None:
        np.savetxt(path, self.norms, delimiter=",", header=",".join(f"t={x:.6g}" for x in self.t))

    def to_svg(self, path: str | Path, envelope=None) -> None:
        series = [svg.Series(self.t, self.median, "median"),
                  svg.Series(self.t, self.quantile(0.9), "q90", dashed=True)]
        if envelope is not None:
            series.append(svg.Series(self.t, np.asarray(envelope, dtype=float), "envelope", dashed=True))
        svg.line_plot(series, path, title=f"random wave decay, R = {self.R:g}", xlabel="t",
                      ylabel="||psi U(t) psi u||", logy=True)


def decay_experiment(manifold: Manifold, R: float, eps_prime: float, t_grid, n_trials: int, seed: int,
                     cutoff: Cutoff | None = None, alpha_param: float = 1.0, eps_energy: float = 0.35,
                     plan: PropagatorPlan | None = None, workers: int = 1, cache=None) -> tuple[DecayCurve, WindowEvolution]:
    """Run the random-wave decay experiment; also returns the shared window evolution (HS norms)."""
    t = np.asarray(t_grid, dtype=float)
    if n_trials < 1:
        raise ValueError("n_trials must be positive")
    lo = alpha_param * math.log(R)
    if t.min() < lo - 1e-12:
        raise ValueError(f"t grid starts below alpha log R = {lo:.4g}")
    if plan is None:
        plan = build_plan(manifold, R, eps_prime, t_max=float(t.max()), cutoff=cutoff, eps_energy=eps_energy)
    ev = evolve_window(plan, t, trials=n_trials, seed=seed, workers=workers, cache=cache)
    norms = np.sqrt(np.maximum(ev.trial_norm2, 0.0))
    info = dict(ev.plan, max_leakage=ev.max_leakage, modes_propagated=ev.modes_propagated,
                alpha_param=alpha_param)
    return DecayCurve(t, norms, float(R), int(seed), float(eps_prime), ev.normalized_hs2, info), ev


def envelope_values(t, R: float, gamma: float, lam: float, eps: float, alpha_param: float):
    return decay_envelope(t, R, gamma, lam, eps, alpha_param)


@dataclass(frozen=True)
class EnvelopeReport:
    m: np.ndarray
    pass_fraction: np.ndarray
    m95: float
    ratio_max: np.ndarray  # per trial: max_t norm / sqrt(V((1 - eps) min(t, 2 t_e)))

    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.pass_fraction) >= 0))


def envelope_check(curve: DecayCurve, volume: VolumeCurve, eps: float, m_grid, lambda_eff: float) -> EnvelopeReport:
    """Fraction of trials below m sqrt(V((1 - eps) min(t, 2 t_e))) on the whole grid, per m."""
    knee = 2.0 * ehrenfest_time(curve.R, lambda_eff)
    s = (1.0 - eps) * np.minimum(curve.t, knee)
    if s.min() < volume.t[0] - 1e-12 or s.max() > volume.t[-1] + 1e-12:
        raise ValueError(f"volume curve covers [{volume.t[0]}, {volume.t[-1]}], need [{s.min()}, {s.max()}]")
    ref = np.sqrt(volume.at(s))
    ratio = np.max(curve.norms / ref[None, :], axis=1)
    m = np.asarray(m_grid, dtype=float)
    frac = np.array([np.mean(ratio <= mi) for mi in m])
    return EnvelopeReport(m, frac, float(np.quantile(ratio, 0.95)), ratio)


# ---------------------------------------------------------------- concentration


@dataclass(frozen=True)
class TestOperator:
    """A test operator through its squared action: ||A a||^2 = sum_i s_i |a_i|^2 or a^H H a."""

    name: str
    N: int
    diag: np.ndarray | None = None
    gram: np.ndarray | None = None

    @property
    def hs2(self) -> float:
        return float(np.sum(self.diag)) if self.diag is not None else float(np.real(np.trace(self.gram)))

    def norm2(self, a: np.ndarray) -> np.ndarray:
        if self.diag is not None:
            return np.abs(a) ** 2 @ self.diag
        return np.real(np.einsum("ij,ij->i", a.conj(), a @ self.gram.T))


def make_operator(kind: str, N: int, spectrum=None, gram=None) -> TestOperator:
    if kind == "identity":
        return TestOperator(kind, N, diag=np.ones(N))
    if kind == "projector":
        d = np.zeros(N)
        d[0] = 1.0
        return TestOperator(kind, N, diag=d)
    if kind == "half":
        d = np.zeros(N)
        d[: N // 2] = 1.0
        return TestOperator(kind, N, diag=d)
    if kind == "diagonal":
        s = np.asarray(spectrum, dtype=float)
        if s.shape != (N,):
            raise ValueError("spectrum must have length N")
        return TestOperator(kind, N, diag=np.abs(s) ** 2)
    if kind == "gram":
        g = np.asarray(gram)
        if g.shape != (N, N):
            raise ValueError("gram must be N x N")
        return TestOperator(kind, N, gram=g)
    raise ValueError(f"unknown operator kind {kind!r}")


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def concentration_bound(m) -> np.ndarray:
    return 2.0 * np.exp(-np.asarray(m, dtype=float) ** 2 / 16.0)


@dataclass(frozen=True)
class ConcentrationReport:
    operator: str
    N: int
    hs_norm: float
    m: np.ndarray
    exceed: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    bound: np.ndarray
    n_trials: int

    @property
    def passed(self) -> bool:
        # empirical frequency must not exceed the bound by more than its CI half-width
        return bool(np.all(self.exceed <= self.bound + (self.ci_high - self.exceed)))


def _op_norms(op: TestOperator, n_trials: int, seed: int, block: int = 4096) -> np.ndarray:
    out = np.empty(n_trials)
    for s in range(0, n_trials, block):
        c = min(block, n_trials - s)
        out[s:s + c] = op.norm2(sample_sphere(op.N, seed, c, start=s).a)
    return np.sqrt(np.maximum(out, 0.0))


def concentration_test(op: TestOperator, m_grid, n_trials: int, seed: int) -> ConcentrationReport:
    m = np.asarray(m_grid, dtype=float)
    if np.any(m < 10):
        raise ValueError("the inequality is stated for m >= 10")
    norms = _op_norms(op, n_trials, seed)
    hs = math.sqrt(op.hs2)
    cnt = np.array([int(np.sum(norms > mi * hs / math.sqrt(op.N))) for mi in m])
    lo, hi = zip(*(wilson_interval(c, n_trials) for c in cnt))
    return ConcentrationReport(op.name, op.N, hs, m, cnt / n_trials, np.array(lo), np.array(hi),
                               concentration_bound(m), n_trials)


@dataclass(frozen=True)
class MeanIdentityReport:
    mean: float
    stderr: float
    expected: float
    n_trials: int

    @property
    def z(self) -> float:
        # floor the error at rounding level: for isometries every sample equals the mean
        return abs(self.mean - self.expected) / max(self.stderr, 1e-12 * abs(self.expected), 1e-300)

    @property
    def passed(self) -> bool:
        return self.z <= 3.0


def mean_identity_check(op: TestOperator, n_trials: int, seed: int) -> MeanIdentityReport:
    """E ||A u||^2 against ||A||_HS^2 / N."""
    v = _op_norms(op, n_trials, seed) ** 2
    return MeanIdentityReport(float(v.mean()), float(v.std(ddof=1) / math.sqrt(n_trials)), op.hs2 / op.N, n_trials)


def propagator_mean_identity(plan: PropagatorPlan, t_grid, n_trials: int, seed: int,
                             workers: int = 1) -> list[MeanIdentityReport]:
    """Mean identity for A = psi U(t) psi Pi_R: Monte Carlo over the sphere vs the exact HS sum."""
    ev = evolve_window(plan, t_grid, trials=n_trials, seed=seed, workers=workers)
    out = []
    for i in range(ev.t.size):
        v = ev.trial_norm2[:, i]
        out.append(MeanIdentityReport(float(v.mean()), float(v.std(ddof=1) / math.sqrt(n_trials)),
                                      float(ev.normalized_hs2[i]), n_trials))
    return out
