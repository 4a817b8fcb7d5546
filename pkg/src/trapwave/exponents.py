"""Closed-form exponents and envelopes built from the classical rates.

All functions here are cheap scalar evaluations; unknown constants are set
to 1 and never fitted.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import VolumeCurve

DEFAULT_LAMBDA_EFF = 0.1


def ehrenfest_time(R: float, lambda_eff: float) -> float:
    """log R / (2 Lambda)."""
    if lambda_eff <= 0:
        raise ValueError("lambda_eff must be positive (substitute a small rate when the fit gives 0)")
    if R <= 1:
        raise ValueError("R must exceed 1")
    return math.log(R) / (2.0 * lambda_eff)


def weyl_exponent_m(d: int, beta: float, gamma: float, lam: float) -> float:
    """Counting exponent for resonances in the strip Im >= -beta.

    d - 1 - (gamma - beta) / Lambda below the knee beta = gamma / 2 and
    d - 1 - gamma / (2 Lambda) above it.
    """
    if lam <= 0:
        raise ValueError("Lambda must be positive")
    if d < 2 or beta < 0 or gamma < 0:
        raise ValueError("need d >= 2, beta >= 0, gamma >= 0")
    if beta <= 0.5 * gamma:
        return d - 1 - (gamma - beta) / lam
    return d - 1 - gamma / (2.0 * lam)


def weyl_exponent_mprime(d: int, beta: float, delta: float) -> float:
    """Comparison exponent min(2 delta + 2 beta + 1 - d, delta) for convex co-compact quotients."""
    if not 0 <= delta < d - 1:
        raise ValueError("need 0 <= delta < d - 1")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return min(2 * delta + 2 * beta + 1 - d, delta)


def weyl_bound_rhs(d: int, R: float, beta: float, eps: float, curve: VolumeCurve,
                   lambda_eff: float) -> float:
    """R^{d-1} min[V((1-eps) t_e), exp(2 beta t_e) V(2 (1-eps) t_e)] with unit constant."""
    te = ehrenfest_time(R, lambda_eff)
    t1 = (1.0 - eps) * te
    t2 = 2.0 * (1.0 - eps) * te
    if t2 > curve.t[-1] + 1e-12 or t1 < curve.t[0] - 1e-12:
        raise ValueError(f"curve covers [{curve.t[0]}, {curve.t[-1]}] but needs [{t1}, {t2}]")
    v1 = float(curve.at(t1))
    v2 = float(curve.at(t2))
    return R ** (d - 1) * min(v1, math.exp(2.0 * beta * te) * v2)


def decay_envelope(t, R: float, gamma: float, lam: float, eps: float, alpha_param: float):
    """Two-branch decay envelope of a random wave, prefactor 1.

    exp((-gamma/2 + eps) t) up to the knee 2 t_e, and the value reached at the
    knee afterwards, which is R^{-gamma / (2 Lambda)} when eps = 0.
    """
    t = np.asarray(t, dtype=float)
    lo = alpha_param * math.log(R)
    if np.any(t < lo - 1e-12):
        raise ValueError(f"t must be at least alpha * log R = {lo}")
    knee = 2.0 * ehrenfest_time(R, lam)
    rate = -0.5 * gamma + eps
    out = np.exp(rate * np.minimum(t, knee))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ExponentCurve:
    beta: np.ndarray
    m: np.ndarray
    m_prime: np.ndarray
    params: dict

    def to_csv(self, path: str | Path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["beta", "m", "m_prime"])
            for row in zip(self.beta, self.m, self.m_prime):
                w.writerow([repr(float(x)) for x in row])


def exponent_curve(d: int, gamma: float, lam: float, delta: float, beta_grid) -> ExponentCurve:
    beta = np.asarray(beta_grid, dtype=float)
    m = np.array([weyl_exponent_m(d, b, gamma, lam) for b in beta])
    mp = np.array([weyl_exponent_mprime(d, b, delta) for b in beta])
    return ExponentCurve(beta, m, mp, {"d": d, "gamma": gamma, "Lambda": lam, "delta": delta})
