from __future__ import annotations

import csv
import math

import numpy as np
import pytest

from oracles import divergence_form_eigenvalues, free_half_wave, interval_dirichlet, wave_packet
from trapwave.geometry import Manifold, make_builtin_profile
from trapwave.spectral import (
    Cutoff,
    HorizonError,
    PlanCache,
    build_mode_operator,
    build_mode_propagator,
    build_plan,
    dirichlet_eigensystem,
    embed_and_measure,
    eigenvalue_table_csv,
    evolve_window,
    frequency_window,
    hs_norm_cutoff_propagator,
    mode_potential,
    read_container,
    reduce_mode,
    sturm_count,
    write_container,
)

CYL = Manifold(make_builtin_profile("cylindrical"), 2)
NECK = Manifold(make_builtin_profile("neck"), 2)
DEG2 = Manifold(make_builtin_profile("degenerate", n=2), 2)


# ---------------------------------------------------------------- mode operators


def test_potential_values():
    r = np.linspace(-2, 2, 101)
    np.testing.assert_allclose(mode_potential(CYL.profile, 0, r), 0.0, atol=1e-10)
    assert mode_potential(CYL.profile, 3, [4.5])[0] == pytest.approx((9 - 0.25) / 4.5**2, rel=1e-14)
    assert abs(mode_potential(DEG2.profile, 0, [0.0])[0]) < 1e-10


def test_operator_arguments():
    with pytest.raises(ValueError):
        build_mode_operator(NECK, 0, 5.0, 100)
    with pytest.raises(ValueError):
        build_mode_operator(Manifold(NECK.profile, 3), 0, 5.0, 400)


def test_flat_dirichlet_eigenvalues():
    # cylinder k = 0 on [-2, 2] is the free interval of length 4
    op = build_mode_operator(CYL, 0, 2.0, 4000)
    mu = dirichlet_eigensystem(op, index_range=(0, 19), vectors=False).values
    np.testing.assert_allclose(mu, interval_dirichlet(4.0, np.arange(1, 21)), rtol=1e-4)


def test_second_order_convergence():
    exact = interval_dirichlet(4.0, np.arange(1, 21))
    errs = []
    for n in (499, 999, 1999):
        op = build_mode_operator(CYL, 0, 2.0, n)
        errs.append(np.abs(dirichlet_eigensystem(op, index_range=(0, 19), vectors=False).values - exact))
    for coarse, fine in zip(errs, errs[1:]):
        np.testing.assert_allclose(coarse / fine, 4.0, atol=0.3)


def test_parity_alternates():
    op = build_mode_operator(NECK, 0, 5.0, 1001)  # odd count: grid symmetric about r = 0
    eb = dirichlet_eigensystem(op, index_range=(0, 9))
    flip = eb.vectors[::-1]
    for i in range(10):
        sign = 1.0 if i % 2 == 0 else -1.0
        np.testing.assert_allclose(flip[:, i], sign * eb.vectors[:, i], atol=1e-8)


def test_weyl_count():
    # one-dimensional Weyl law: #{sqrt(mu) <= s} ~ 2 r1 s / pi for k = 0
    op = build_mode_operator(NECK, 0, 5.0, 4000)
    s = 50.0
    assert sturm_count(op, s * s) == pytest.approx(10.0 * s / math.pi, rel=0.05)


@pytest.mark.parametrize("k", [0, 3])
def test_half_density_gauge_is_unitarily_equivalent(k):
    # same spectrum as the weighted divergence-form operator, after Richardson extrapolation of both
    ours, theirs = [], []
    for n in (1999, 3999):
        op = build_mode_operator(NECK, k, 5.0, n)
        ours.append(dirichlet_eigensystem(op, index_range=(0, 49), vectors=False).values)
        theirs.append(divergence_form_eigenvalues(NECK.profile, k, 5.0, n, 50))
    a = (4 * ours[1] - ours[0]) / 3
    b = (4 * theirs[1] - theirs[0]) / 3
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_residuals_and_orthonormality():
    op = build_mode_operator(NECK, 5, 5.0, 2000)
    eb = dirichlet_eigensystem(op, value_range=(100.0, 900.0))
    assert eb.values.size > 5
    assert np.max(eb.residuals(op) / eb.values) <= 1e-10
    assert eb.orthonormality_error() <= 1e-10
    assert np.all(np.diff(eb.j) == 1) and eb.j[0] == sturm_count(op, 100.0) + 1


# ---------------------------------------------------------------- frequency windows


def test_window_indices_on_flat_core():
    # k = 0 of the cylinder truncated to its flat core [-2, 2]: sqrt(mu_j) = j pi / 4
    op = build_mode_operator(CYL, 0, 2.0, 3999)
    R, eps = 25.0, 0.1
    eb = dirichlet_eigensystem(op, value_range=((R * (1 - eps)) ** 2, (R * (1 + eps)) ** 2))
    assert eb.j.tolist() == list(range(29, 36))


def test_closed_window_is_empty():
    assert frequency_window(NECK, 30.0, 0.0).N == 0
    with pytest.raises(ValueError):
        frequency_window(NECK, 30.0, -0.1)


def test_window_is_complete():
    w = frequency_window(NECK, 30.0, 0.1)
    more = frequency_window(NECK, 30.0, 0.1, k_extra=max(1, w.k_max // 10))
    assert w.N == more.N and w.N > 0
    assert np.all(np.abs(w.freq / 30.0 - 1.0) <= 0.1 + 1e-12)
    ks = w.mode_counts()
    assert all(ks[k] == ks[-k] for k in ks)


def test_window_count_grows_like_area():
    # two-dimensional Weyl law: N_R ~ area(B) R^2 ((1 + eps')^2 - (1 - eps')^2) / (4 pi)
    from trapwave.geometry import liouville_total
    for R in (30.0, 60.0):
        N = frequency_window(NECK, R, 0.1).N
        area = liouville_total(NECK) / (2 * math.pi)
        assert N == pytest.approx(area * R * R * 0.1 / math.pi, rel=0.1)


# ---------------------------------------------------------------- propagator


@pytest.fixture(scope="module")
def flat_prop():
    # cylinder k = 0: the potential vanishes on [-2, 2]; horizon measured from r = 2
    return build_mode_propagator(CYL, 0, 3.0, 3999, r1=2.0, margin=0.0)


@pytest.fixture(scope="module")
def flat_grid():
    return build_mode_operator(CYL, 0, 3.0, 3999)


def test_propagator_identity_and_unitarity(flat_prop, flat_grid):
    rng = np.random.default_rng(3)
    c = rng.standard_normal(flat_grid.n) + 1j * rng.standard_normal(flat_grid.n)
    np.testing.assert_array_equal(flat_prop.apply(c, 0.0), c)
    for t in (0.3, 1.7):
        assert np.linalg.norm(flat_prop.apply(c, t)) == pytest.approx(np.linalg.norm(c), rel=1e-12)
    np.testing.assert_allclose(flat_prop.apply(flat_prop.apply(c, 0.6), 0.9), flat_prop.apply(c, 1.5),
                               rtol=0, atol=1e-12 * np.abs(c).max())
    u = wave_packet(flat_grid.r, 0.0, 0.3, 10.0)
    back = flat_prop.synthesize(flat_prop.coefficients(u))
    np.testing.assert_allclose(back, u, atol=1e-10)


def test_horizon_enforced(flat_prop):
    with pytest.raises(HorizonError):
        flat_prop.apply(np.zeros(3), flat_prop.t_valid + 0.1)
    with pytest.raises(HorizonError):
        flat_prop.apply(np.zeros(3), -0.1)


@pytest.mark.parametrize("t", [0.25, 0.5, 1.0])
def test_matches_free_half_wave(flat_prop, flat_grid, t):
    # a high-frequency packet stays in the flat core, where the half-wave group is the free one
    x = flat_grid.r
    u0 = wave_packet(x, -0.5, 0.3, 16.0)
    v = flat_prop.synthesize(flat_prop.apply(flat_prop.coefficients(u0), t))
    X = np.linspace(-40, 40, 2**17, endpoint=False)
    ref = free_half_wave(X, wave_packet(X, -0.5, 0.3, 16.0), t)
    ref = np.interp(x, X, ref.real) + 1j * np.interp(x, X, ref.imag)
    core = np.abs(x) <= 1.5
    assert np.max(np.abs(v - ref)[core]) <= 1e-3


@pytest.mark.parametrize("t", [0.3, 0.6])
def test_finite_speed(flat_prop, flat_grid, t):
    x = flat_grid.r
    u = wave_packet(x, 0.0, 0.15, 40.0) * (np.abs(x) <= 1.0)
    v = flat_prop.synthesize(flat_prop.apply(flat_prop.coefficients(u), t))
    far = np.abs(x) >= 1.0 + t + 0.3
    assert math.sqrt(flat_grid.dr * np.sum(np.abs(v[far]) ** 2)) <= 1e-6


def test_embed_and_measure(flat_prop, flat_grid):
    x = flat_grid.r
    u = wave_packet(x, 0.0, 0.2, 12.0)
    psi = Cutoff(1.5)(x)
    assert embed_and_measure(flat_prop, x, u, np.zeros_like(x), 0.7, 2.0) == 0.0
    direct = math.sqrt(flat_grid.dr * np.sum(np.abs(psi * psi * u) ** 2))
    assert embed_and_measure(flat_prop, x, u, psi, 0.0, 2.0) == pytest.approx(direct, rel=1e-10)
    with pytest.raises(ValueError):
        embed_and_measure(flat_prop, x, u, np.ones_like(x), 0.0, 2.0)


# ---------------------------------------------------------------- window evolution


@pytest.fixture(scope="module")
def small_plan():
    return build_plan(NECK, 20.0, 0.1, 6.0, eps_energy=0.35)


def test_plan_time_zero_matches_direct_sum(small_plan):
    p = small_plan
    w = frequency_window(NECK, p.R, p.eps_prime, dr=p.dr, vectors=True)
    r = p.dr * np.arange(-p.half_b + 1, p.half_b)
    psi2 = p.cutoff(r) ** 2
    direct = 0.0
    unit = 0.0
    for k, eb in w.bases.items():
        mult = 1 if k == 0 else 2
        direct += mult * p.dr * np.sum((psi2[:, None] * eb.vectors) ** 2)
        unit += mult * p.dr * np.sum(eb.vectors**2)
    assert unit == pytest.approx(w.N, rel=1e-10)  # psi = 1 on B gives the trace of the projector
    ev = hs_norm_cutoff_propagator(p, [0.0, 3.0, 6.0])
    assert ev.hs2[0] == pytest.approx(direct, rel=1e-3)
    assert np.all(ev.normalized_hs2 <= 1.0)
    with pytest.raises(HorizonError):
        hs_norm_cutoff_propagator(p, [p.t_valid + 1.0])


def test_plan_arguments():
    with pytest.raises(ValueError):
        build_plan(NECK, 20.0, 0.3, 6.0, eps_energy=0.35)  # band does not nest the window
    with pytest.raises(ValueError):
        build_plan(NECK, 20.0, 0.1, 6.0, cutoff=Cutoff(NECK.r1))


def test_energy_localization_improves_with_R():
    leak = {}
    for R in (50.0, 100.0):
        p = build_plan(NECK, R, 0.1, 4.0, eps_energy=0.35)
        leak[R] = max(reduce_mode(p, k).max_leakage for k in (0, int(R / 4), int(R / 2)))
    assert leak[100.0] <= 1e-3 and leak[100.0] < leak[50.0]


def test_worker_count_and_cache(small_plan, tmp_path):
    t = np.linspace(0, 6, 7)
    a = evolve_window(small_plan, t, trials=3, seed=5, workers=1)
    b = evolve_window(small_plan, t, trials=3, seed=5, workers=2)
    np.testing.assert_array_equal(a.hs2, b.hs2)
    np.testing.assert_array_equal(a.trial_norm2, b.trial_norm2)
    cache = PlanCache(tmp_path)
    c1 = evolve_window(small_plan, t, trials=3, seed=5, cache=cache)
    c2 = evolve_window(small_plan, t, trials=3, seed=5, cache=cache)
    np.testing.assert_array_equal(c1.hs2, a.hs2)
    np.testing.assert_array_equal(c2.trial_norm2, a.trial_norm2)
    red = reduce_mode(small_plan, 3)
    back = cache.load_reduction(small_plan, 3)
    for x, y in zip(red.blocks, back.blocks):
        np.testing.assert_array_equal(x.C, y.C)
        np.testing.assert_array_equal(x.G, y.G)


def test_container_roundtrip(tmp_path):
    arrays = {"a": np.arange(5.0), "b": np.eye(3, dtype=np.int64), "c": np.array([1 + 2j])}
    write_container(tmp_path / "x.bin", arrays)
    back = read_container(tmp_path / "x.bin")
    assert set(back) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
        assert back[k].dtype == arrays[k].dtype
    (tmp_path / "bad.bin").write_bytes(b"NOTMAGIC" + bytes(8))
    with pytest.raises(ValueError):
        read_container(tmp_path / "bad.bin")


def test_eigenvalue_csv(tmp_path):
    w = frequency_window(NECK, 15.0, 0.1)
    p = tmp_path / "eig.csv"
    eigenvalue_table_csv(w, p, "config_hash: 123")
    lines = p.read_text().splitlines()
    assert lines[0] == "# config_hash: 123" and lines[1] == "k,j,lambda"
    rows = list(csv.reader(lines[2:]))
    assert len(rows) == w.N
    assert float(rows[0][2]) == w.freq[0]
