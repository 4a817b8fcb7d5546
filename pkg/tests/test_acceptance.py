"""End-to-end acceptance experiments, one test per criterion.

Each test prints a ``CRITERION n: PASS/FAIL`` line with the measured numbers
(collected again in the terminal summary) and then asserts the same verdict.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest

from conftest import record
from oracles import (
    divergence_form_eigenvalues,
    free_half_wave,
    interval_dirichlet,
    projector_tail,
    sweep_escape_rate,
    wave_packet,
)
from trapwave import decay
from trapwave.exponents import (
    decay_envelope,
    ehrenfest_time,
    exponent_curve,
    weyl_exponent_m,
    weyl_exponent_mprime,
)
from trapwave.flow import flow_arrays
from trapwave.geometry import Manifold, make_builtin_profile
from trapwave.resonances import (
    ScalingProfile,
    build_scaled_operator,
    count_resonances,
    refine_resonance,
    shooting_oracle,
)
from trapwave.spectral import (
    build_mode_operator,
    build_mode_propagator,
    build_plan,
    dirichlet_eigensystem,
    frequency_window,
)
from trapwave.volume import (
    estimate_lambda_max,
    estimate_volume_curve,
    fit_escape_rate,
    fit_power_law,
    island_extent,
    loglog_slope,
)

pytestmark = pytest.mark.slow

CYL = Manifold(make_builtin_profile("cylindrical"), 2)
DEG2 = Manifold(make_builtin_profile("degenerate", n=2), 2)
NECK = Manifold(make_builtin_profile("neck"), 2)

DECAY_R = (100.0, 150.0, 200.0)
DECAY_SEED = 20261016
EPS_PRIME = 0.1


def linear_rate(profile) -> float:
    a, _, d2 = profile(0.0)
    return math.sqrt(d2 / a)


@pytest.fixture(scope="module")
def neck_rates():
    curve = estimate_volume_curve(NECK, np.linspace(5, 30, 26), 200_000, 1, method="focused")
    gamma = fit_escape_rate(curve, (5, 30))
    lam = estimate_lambda_max(NECK, 30.0, 100_000, 2)
    return curve, gamma, lam


@pytest.fixture(scope="module")
def decay_runs():
    runs = {}
    for R in DECAY_R:
        te = ehrenfest_time(R, 1.0)
        t = np.arange(3.0, 4 * te + 1e-9, 0.25)
        t0 = time.time()
        curve, ev = decay.decay_experiment(NECK, R, EPS_PRIME, t, 200, DECAY_SEED, alpha_param=0.5,
                                           eps_energy=0.35)
        runs[R] = (curve, ev, time.time() - t0)
    return runs


def test_criterion_1_cylinder_volume_law():
    t0 = time.time()
    curve = estimate_volume_curve(CYL, np.geomspace(10, 1000, 21), 1_000_000, 1, r_ball=3.0)
    fit = fit_power_law(curve, (10, 1000))
    ok = abs(fit.value + 1.0) <= 0.15
    record(1, ok, f"slope {fit.value:.3f} +- {fit.stderr:.3f} (target -1 +- 0.15), {time.time() - t0:.0f} s")
    assert ok


def test_criterion_2_degenerate_volume_law():
    t0 = time.time()
    curve = estimate_volume_curve(DEG2, np.geomspace(10, 300, 16), 200_000, 1, method="focused")
    slope = fit_power_law(curve, (10, 300)).value
    isl = island_extent(DEG2, np.geomspace(10, 300, 12), 0.5, 200_000, 3)
    er = loglog_slope(isl.t, isl.max_r0)[0]
    ep = loglog_slope(isl.t, isl.max_rho0)[0]
    n = 2
    ok = slope <= -2.7 and abs(er + 1 / (n - 1)) <= 0.2 and abs(ep + n / (n - 1)) <= 0.2
    record(2, ok, f"slope {slope:.3f} (<= -2.7); max r(0) exponent {er:.3f} (-1 +- 0.2); "
                  f"max rho(0) exponent {ep:.3f} (-2 +- 0.2), {time.time() - t0:.0f} s")
    assert ok


def test_criterion_3_neck_rates(neck_rates):
    _, gamma, lam = neck_rates
    lin = linear_rate(NECK.profile)
    sweep, _ = sweep_escape_rate(NECK.profile, NECK.r1, np.geomspace(1e-3, 1e-9, 13))
    ok_l = abs(lam.value - lin) <= 0.10 * lin
    ok_g = gamma.regime == "exponential" and abs(gamma.gamma - sweep) <= 0.15 * sweep
    record(3, ok_l and ok_g, f"Lambda {lam.value:.4f} vs linearisation {lin:.4f}; "
                             f"gamma {gamma.gamma:.4f} vs sweep rate {sweep:.4f}")
    assert ok_l and ok_g


def test_criterion_4_dynamics_properties():
    t0 = time.time()
    rng = np.random.default_rng(4)
    n = 10_000
    worst = {}
    for name, m in (("cyl", CYL), ("deg", DEG2), ("neck", NECK)):
        prof = m.profile
        r = rng.uniform(-6, 6, n)
        rho = rng.uniform(-1, 1, n)
        p0 = prof.alpha(r) ** 2 * (1 - rho**2)
        rr, pp = flow_arrays(prof, r, rho, p0, 1000.0)
        worst[f"energy_{name}"] = float(np.max(np.abs(pp**2 + p0 / prof.alpha(rr) ** 2 - 1)))
        fr, fp = flow_arrays(prof, r, rho, p0, 100.0)
        br, bp = flow_arrays(prof, fr, fp, p0, -100.0)
        worst[f"reverse_{name}"] = float(max(np.max(np.abs(br - r)), np.max(np.abs(bp - rho))))
        # escape inequalities for outgoing states
        out = rho * r >= 0
        lemma, euclid = 0.0, 0.0
        for t in np.linspace(0.5, 20.0, 12):
            rt, _ = flow_arrays(prof, r[out], rho[out], p0[out], t)
            lemma = max(lemma, float(np.max(np.abs(r[out]) + np.abs(rho[out]) * t - np.abs(rt))))
            far = np.abs(r[out]) >= m.r0
            euclid = max(euclid, float(np.max(np.sqrt(r[out][far] ** 2 + t * t) - np.abs(rt[far]))))
        worst[f"lemma_{name}"] = lemma
        worst[f"euclid_{name}"] = euclid
    tol = {"energy": 1e-9, "reverse": 1e-7, "lemma": 1e-6, "euclid": 1e-6}
    ok_pts = all(v <= tol[k.split("_")[0]] for k, v in worst.items())
    # monotonicity and independence of the ball, within confidence intervals
    t = np.linspace(10, 60, 11)
    small = estimate_volume_curve(CYL, t, 80_000, 21)
    mono = all(small.V[j] <= small.V[i] + small.ci[i] + small.ci[j]
               for i in range(t.size) for j in range(i + 1, t.size))
    fine = np.linspace(10, 80, 71)
    big = estimate_volume_curve(CYL, fine, 80_000, 22, r_ball=6.0)
    shift = None
    for T in (0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0):
        s = t + 2 * T
        k = s <= fine[-1]
        slack = small.ci[k] + np.interp(s[k], fine, big.ci)
        if np.all(np.interp(s[k], fine, big.V) <= small.V[k] + slack):
            shift = T
            break
    ok = ok_pts and mono and shift is not None
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(4, ok, f"{summary}; monotone {mono}; ball shift T = {shift}, {time.time() - t0:.0f} s")
    assert ok


def test_criterion_5_exponent_formulas(tmp_path):
    vectors = [weyl_exponent_m(2, 0.1, 0.5, 1.0) == pytest.approx(0.6, abs=1e-15),
               weyl_exponent_m(2, 0.3, 0.5, 1.0) == pytest.approx(0.75, abs=1e-15),
               weyl_exponent_m(2, 0.25, 0.5, 1.0) == pytest.approx(0.75, abs=1e-15),
               weyl_exponent_mprime(2, 0.0, 0.5) == 0.0,
               weyl_exponent_mprime(2, 0.25, 0.5) == pytest.approx(0.5, abs=1e-15),
               weyl_exponent_mprime(2, 0.1, 0.5) == pytest.approx(0.2, abs=1e-15)]
    R = math.exp(10)
    knee = 2 * ehrenfest_time(R, 1.0)
    lo = decay_envelope(knee * (1 - 1e-12), R, 1.0, 1.0, 0.0, 0.0)
    hi = decay_envelope(knee * (1 + 1e-12), R, 1.0, 1.0, 0.0, 0.0)
    cont = abs(lo - hi) <= 1e-9 * hi and hi == pytest.approx(R**-0.5, rel=1e-12)
    path = tmp_path / "figure1a.csv"
    exponent_curve(2, 0.5, 1.0, 0.5, np.linspace(0, 1, 101)).to_csv(path, "config_hash: acceptance")
    rows = path.read_text().splitlines()
    ok = all(vectors) and cont and len(rows) == 103
    record(5, ok, f"{sum(vectors)}/{len(vectors)} exponent vectors, knee continuity {cont}, CSV rows {len(rows) - 2}")
    assert ok


def test_criterion_6_spectral_oracles():
    t0 = time.time()
    op = build_mode_operator(CYL, 0, 2.0, 4000)
    mu = dirichlet_eigensystem(op, index_range=(0, 19), vectors=False).values
    flat = float(np.max(np.abs(mu / interval_dirichlet(4.0, np.arange(1, 21)) - 1)))
    ours, theirs = [], []
    for n in (1999, 3999):
        o = build_mode_operator(NECK, 3, 5.0, n)
        ours.append(dirichlet_eigensystem(o, index_range=(0, 49), vectors=False).values)
        theirs.append(divergence_form_eigenvalues(NECK.profile, 3, 5.0, n, 50))
    a = (4 * ours[1] - ours[0]) / 3
    b = (4 * theirs[1] - theirs[0]) / 3
    equiv = float(np.max(np.abs(a / b - 1)))
    prop = build_mode_propagator(CYL, 0, 3.0, 3999, r1=2.0, margin=0.0)
    x = build_mode_operator(CYL, 0, 3.0, 3999).r
    h = x[1] - x[0]
    rng = np.random.default_rng(6)
    c = rng.standard_normal(x.size) + 1j * rng.standard_normal(x.size)
    unitary = abs(np.linalg.norm(prop.apply(c, 1.3)) / np.linalg.norm(c) - 1)
    u = wave_packet(x, 0.0, 0.15, 40.0) * (np.abs(x) <= 1.0)
    leak = 0.0
    for t in (0.3, 0.6):
        v = prop.synthesize(prop.apply(prop.coefficients(u), t))
        leak = max(leak, math.sqrt(h * np.sum(np.abs(v[np.abs(x) >= 1.3 + t]) ** 2)))
    X = np.linspace(-40, 40, 2**17, endpoint=False)
    u0 = wave_packet(x, -0.5, 0.3, 16.0)
    v = prop.synthesize(prop.apply(prop.coefficients(u0), 1.0))
    ref = free_half_wave(X, wave_packet(X, -0.5, 0.3, 16.0), 1.0)
    ref = np.interp(x, X, ref.real) + 1j * np.interp(x, X, ref.imag)
    free = float(np.max(np.abs(v - ref)[np.abs(x) <= 1.5]))
    Rs = np.array([50.0, 100.0, 200.0])
    counts = np.array([frequency_window(NECK, R, EPS_PRIME).N for R in Rs])
    expo = loglog_slope(Rs, counts)[0]
    ok = flat <= 1e-4 and equiv <= 1e-6 and unitary <= 1e-12 and leak <= 1e-6 and free <= 1e-3 \
        and abs(expo - 2.0) <= 0.1
    record(6, ok, f"flat Dirichlet {flat:.1e}; gauge equivalence {equiv:.1e}; unitarity {unitary:.1e}; "
                  f"finite-speed leakage {leak:.1e}; free half-wave {free:.1e}; N_R {counts.tolist()} "
                  f"exponent {expo:.3f}, {time.time() - t0:.0f} s")
    assert ok


def test_criterion_7_random_wave_decay(decay_runs, neck_rates):
    _, gamma, lam = neck_rates
    g, L = gamma.gamma, lam.value
    R = 150.0
    curve, _, secs = decay_runs[R]
    te = ehrenfest_time(R, L)
    early = curve.t <= 2 * te + 1e-9
    late = curve.t >= 2 * te + 1.0
    med = curve.median
    s_early = np.polyfit(curve.t[early], np.log(med[early]), 1)[0]
    s_late = np.polyfit(curve.t[late], np.log(med[late]), 1)[0]
    rate_ok = abs(-s_early - g / 2) <= 0.3 * g / 2
    ratio = abs(s_early) / max(abs(s_late), 1e-12)
    plateau_ok = ratio >= 5
    levels = {}
    for Rk, (ck, _, _) in decay_runs.items():
        tk = ehrenfest_time(Rk, L)
        m = ck.t >= 2 * tk + 1.0
        levels[Rk] = float(np.exp(np.mean(np.log(ck.median[m]))))
    scaled = np.array([levels[Rk] / Rk ** (-g / (2 * L)) for Rk in DECAY_R])
    level_ok = scaled.max() / scaled.min() <= 3
    ok = rate_ok and plateau_ok and level_ok
    record(7, ok, f"R=150: early slope {s_early:.3f} vs -gamma/2 = {-g / 2:.3f} ({'ok' if rate_ok else 'off'}); "
                  f"late slope {s_late:.3f}, slope ratio {ratio:.2f} (>= 5 {'ok' if plateau_ok else 'fails'}); "
                  f"plateau/R^(-gamma/2Lambda) spread {scaled.max() / scaled.min():.2f} (<= 3); "
                  f"runs {', '.join(f'{r:g}: {v[2]:.0f} s' for r, v in decay_runs.items())}")
    assert ok


def test_criterion_8_concentration():
    t0 = time.time()
    N = 400
    m = np.array([10.0, 11.0, 12.0])
    ops = [decay.make_operator("projector", N),
           decay.make_operator("diagonal", N, spectrum=np.exp(-np.arange(N) / 40.0))]
    conc = [decay.concentration_test(op, m, 100_000, 8 + i) for i, op in enumerate(ops)]
    tail_ok = all(abs(conc[0].exceed[i] - projector_tail(N, mi)) <= conc[0].ci_high[i] - conc[0].ci_low[i] + 1e-5
                  for i, mi in enumerate(m))
    means = [decay.mean_identity_check(op, 100_000, 30 + i) for i, op in enumerate(ops)]
    plan = build_plan(NECK, 30.0, EPS_PRIME, 6.0, eps_energy=0.35)
    prop = decay.propagator_mean_identity(plan, [0.0, 3.0, 6.0], 400, 31)
    ok = all(c.passed for c in conc) and tail_ok and all(r.passed for r in means + prop)
    worst_z = max(r.z for r in means + prop)
    record(8, ok, f"exceedances {[c.exceed.tolist() for c in conc]} vs bound {conc[0].bound.round(4).tolist()}; "
                  f"projector tail matches closed form {tail_ok}; mean identity max z {worst_z:.2f} "
                  f"(propagator at R=30, N={plan.N}), {time.time() - t0:.0f} s")
    assert ok


def test_criterion_9_hs_versus_volume(decay_runs, neck_rates):
    curve_v, gamma, lam = neck_rates
    eps = 0.1
    fitted, peak, rates = {}, {}, {}
    for R, (_, ev, _) in decay_runs.items():
        s = 2 * (1 - eps) * ev.t
        m = (s >= curve_v.t[0]) & (s <= curve_v.t[-1])
        ratio = ev.normalized_hs2[m] / curve_v.at(s[m])
        peak[R] = float(ratio.max())
        # least-squares offset of log HS^2/N against log V over the window where classical and wave
        # evolution still correspond, t <= 2 t_e
        w = ev.t[m] <= 2 * ehrenfest_time(R, lam.value) + 1e-9
        fitted[R] = float(np.exp(np.mean(np.log(ratio[w]))))
        e = ev.t <= 2 * ehrenfest_time(R, lam.value) + 1e-9
        rates[R] = -np.polyfit(ev.t[e], np.log(ev.normalized_hs2[e]), 1)[0]
    vals = np.array(list(fitted.values()))
    spread = vals.max() / vals.min()
    rate_ok = abs(rates[100.0] - gamma.gamma) <= 0.3 * gamma.gamma
    ok = spread <= 3 and rate_ok
    pk = np.array(list(peak.values()))
    record(9, ok, "fitted C on [3, 2 t_e]: " + ", ".join(f"{R:g}: {c:.3g}" for R, c in fitted.items())
           + f"; spread {spread:.2f} (<= 3); HS decay rate at R=100 {rates[100.0]:.3f} vs gamma {gamma.gamma:.3f}"
           + f"; max over whole grid spread {pk.max() / pk.min():.2f} (reported)")
    assert ok


def test_criterion_10_resonances():
    t0 = time.time()
    lam = linear_rate(NECK.profile)
    agree, stable, found = 0.0, 0.0, []
    for k in range(3, 15):
        w, _ = refine_resonance(NECK, k, 0, k - 0.5j * lam, ScalingProfile(0.35, NECK.r1))
        w2, _ = refine_resonance(NECK, k, 0, w, ScalingProfile(0.25, NECK.r1))
        agree = max(agree, abs(w - shooting_oracle(NECK, k, w)))
        stable = max(stable, abs(w - w2))
        found.append(w)
    # second resonance of each mode: its eigenvector grows across the unscaled core, so the
    # scaled eigenvalue is badly conditioned; the gap is reported only
    deep = 0.0
    for k in (10, 12, 14):
        w, _ = refine_resonance(NECK, k, 1, k - 1.5j * lam, ScalingProfile(0.35, NECK.r1))
        deep = max(deep, abs(w - shooting_oracle(NECK, k, w)))
    upper = -np.inf
    for k in (0, 5, 10):
        for par in (0, 1):
            op = build_scaled_operator(NECK, k, ScalingProfile(0.35, NECK.r1), 16.0, 0.02, par)
            om = np.sqrt(np.linalg.eigvals(op.dense()).astype(complex))
            om = np.where(om.real < 0, -om, om)
            upper = max(upper, float(om.imag.max()))
    cnt = count_resonances(NECK, 20.0, 0.8)
    ims = cnt.resonances.omega.imag
    ok = agree <= 1e-6 and stable <= 1e-6 and upper <= 1e-8 and len(found) >= 10
    record(10, ok, f"{len(found)} resonances: shooting gap {agree:.1e}, theta 0.25/0.35 gap {stable:.1e}; "
                   f"second resonances (reported) {deep:.1e}; max Im of scaled spectra {upper:.1e}; N(20, 0.8) = {cnt.count}, "
                   f"mean Im {np.mean(ims) if ims.size else float('nan'):.3f} (reported; -lambda/2 = {-lam / 2:.3f}), "
                   f"{time.time() - t0:.0f} s")
    assert ok
