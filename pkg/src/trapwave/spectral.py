"""Angular-mode reduction of the Laplacian for d = 2 and an exact half-wave propagator.

On the surface dr^2 + alpha(r)^2 dtheta^2 the mode e^{ik theta} of
-Delta, conjugated by alpha^{1/2} (half-density gauge), is the Schroedinger
operator -d^2/dr^2 + W_k with

    W_k = k^2 / alpha^2 + alpha'' / (2 alpha) - (alpha' / alpha)^2 / 4,

so all inner products are flat L^2(dr).  Operators are discretized with
centred second differences on uniform grids with Dirichlet ends; the same
spacing is used on B = [-r1, r1] and on the big propagation domain [-L, L] so
that B eigenvectors embed by zero extension.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import linalg

from .geometry import Manifold, Profile


class HorizonError(ValueError):
    """Requested time beyond the finite-propagation-speed validity horizon."""


def mode_potential(profile: Profile, k: int, r) -> np.ndarray:
    """W_k on the grid r; exactly (k^2 - 1/4) / r^2 where alpha = |r|."""
    r = np.asarray(r, dtype=float)
    a, d1, d2 = profile(r)
    w = k * k / (a * a) + 0.5 * d2 / a - 0.25 * (d1 / a) ** 2
    end = np.abs(r) >= profile.end_radius
    w[end] = (k * k - 0.25) / (r[end] * r[end])
    return w


@dataclass(frozen=True)
class ModeOperator:
    """-d^2 + W_k on the interior points of [-half_length, half_length]."""

    k: int
    half_length: float
    dr: float
    r: np.ndarray
    potential: np.ndarray

    @property
    def n(self) -> int:
        return self.r.size

    def tridiagonal(self) -> tuple[np.ndarray, np.ndarray]:
        inv = 1.0 / (self.dr * self.dr)
        return 2.0 * inv + self.potential, np.full(self.n - 1, -inv)

    def dense(self) -> np.ndarray:
        d, e = self.tridiagonal()
        return np.diag(d) + np.diag(e, 1) + np.diag(e, -1)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        d, e = self.tridiagonal()
        out = d[:, None] * v if v.ndim == 2 else d * v
        out[1:] += (e[:, None] if v.ndim == 2 else e) * v[:-1]
        out[:-1] += (e[:, None] if v.ndim == 2 else e) * v[1:]
        return out


def _check_d2(manifold: Manifold) -> None:
    if manifold.d != 2:
        raise ValueError("the spectral side supports d = 2 only")


def build_mode_operator(manifold: Manifold, k: int, domain_half_length: float, n_grid: int) -> ModeOperator:
    """Mode operator with n_grid interior points on [-L, L] (spacing 2L / (n_grid + 1))."""
    _check_d2(manifold)
    if n_grid < 200:
        raise ValueError("n_grid must be at least 200")
    L = float(domain_half_length)
    dr = 2.0 * L / (n_grid + 1)
    r = -L + dr * np.arange(1, n_grid + 1)
    return ModeOperator(int(k), L, dr, r, mode_potential(manifold.profile, int(k), r))


def mode_operator_spacing(manifold: Manifold, k: int, half_cells: int, dr: float) -> ModeOperator:
    """Mode operator on [-half_cells dr, half_cells dr] with the given spacing."""
    _check_d2(manifold)
    L = half_cells * dr
    r = dr * np.arange(-half_cells + 1, half_cells)
    return ModeOperator(int(k), L, dr, r, mode_potential(manifold.profile, int(k), r))


# ---------------------------------------------------------------- eigen


@njit(cache=True)
def _sturm(d, e, x):
    """Number of eigenvalues of the symmetric tridiagonal (d, e) below x."""
    count = 0
    q = d[0] - x
    if q < 0.0:
        count += 1
    for i in range(1, d.size):
        if q == 0.0:
            q = 1e-300
        q = (d[i] - x) - e[i - 1] * e[i - 1] / q
        if q < 0.0:
            count += 1
    return count


def sturm_count(op: ModeOperator, x: float) -> int:
    d, e = op.tridiagonal()
    return int(_sturm(d, e, float(x)))


@dataclass(frozen=True)
class EigenBasis:
    """Eigenpairs mu_j (ascending) with vectors orthonormal for dr * sum.

    ``first_index`` is the 0-based position of the first stored pair in the
    full ascending spectrum (the Dirichlet index j is first_index + 1 + i).
    """

    k: int
    half_length: float
    dr: float
    values: np.ndarray
    vectors: np.ndarray
    first_index: int = 0

    @property
    def frequencies(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.values, 0.0))

    @property
    def j(self) -> np.ndarray:
        return self.first_index + 1 + np.arange(self.values.size)

    def residuals(self, op: ModeOperator) -> np.ndarray:
        v = self.vectors
        res = op.matvec(v) - v * self.values[None, :]
        return np.sqrt(self.dr * np.sum(res * res, axis=0))

    def orthonormality_error(self) -> float:
        g = self.dr * (self.vectors.T @ self.vectors)
        return float(np.max(np.abs(g - np.eye(g.shape[0])))) if g.size else 0.0


def dirichlet_eigensystem(op: ModeOperator, value_range: tuple[float, float] | None = None,
                          index_range: tuple[int, int] | None = None,
                          vectors: bool = True) -> EigenBasis:
    """Symmetric tridiagonal eigendecomposition (all pairs, or a value / index slice)."""
    d, e = op.tridiagonal()
    kw: dict = {"lapack_driver": "stemr"}
    first = 0
    if value_range is not None:
        lo, hi = value_range
        first = int(_sturm(d, e, float(lo)))
        if int(_sturm(d, e, float(hi))) == first:
            return EigenBasis(op.k, op.half_length, op.dr, np.empty(0), np.empty((op.n, 0)), first)
        kw.update(select="v", select_range=(lo, hi))
    elif index_range is not None:
        first = int(index_range[0])
        kw.update(select="i", select_range=index_range)
    try:
        if vectors:
            w, v = linalg.eigh_tridiagonal(d, e, **kw)
        else:
            w = linalg.eigh_tridiagonal(d, e, eigvals_only=True, **kw)
            v = np.empty((op.n, 0))
    except linalg.LinAlgError as exc:  # pragma: no cover - solver failure
        raise RuntimeError(f"tridiagonal eigensolver failed for mode {op.k}: {exc}") from exc
    v = v / math.sqrt(op.dr)
    # deterministic sign: first sizeable entry positive
    if v.size:
        piv = np.argmax(np.abs(v) > 1e-3 * np.abs(v).max(axis=0), axis=0)
        sgn = np.sign(v[piv, np.arange(v.shape[1])])
        v = v * np.where(sgn == 0, 1.0, sgn)[None, :]
    return EigenBasis(op.k, op.half_length, op.dr, w, v, first)


# ---------------------------------------------------------------- windows


def max_mode(manifold: Manifold, R: float, eps_prime: float, extent: float | None = None) -> int:
    """Largest |k| whose mode can carry frequencies up to R (1 + eps') on |r| <= extent.

    Beyond it W_k >= k^2 / max alpha^2 > R^2 (1 + eps')^2 on the whole region.
    """
    ext = manifold.r1 if extent is None else float(extent)
    grid = np.linspace(-ext, ext, 4001)
    amax = float(np.max(manifold.profile.alpha(grid)))
    return int(math.ceil(R * (1.0 + eps_prime) * amax))


@dataclass(frozen=True)
class WindowedBasis:
    """Index set I_R of B-eigenpairs (k, j) with frequency in R [1 - eps', 1 + eps']."""

    R: float
    eps_prime: float
    k: np.ndarray
    j: np.ndarray
    freq: np.ndarray
    k_max: int
    dr: float
    bases: dict = field(default_factory=dict, repr=False)  # k >= 0 -> EigenBasis (if vectors kept)

    @property
    def N(self) -> int:
        return int(self.k.size)

    def mode_counts(self) -> dict[int, int]:
        ks, cnt = np.unique(self.k, return_counts=True)
        return dict(zip(ks.tolist(), cnt.tolist()))


def b_grid(manifold: Manifold, R: float, eps_prime: float, points_per_wavelength: float = 12.0,
           dr: float | None = None) -> tuple[float, int]:
    """(spacing, half_cells) with r1 = half_cells * spacing exactly."""
    if dr is None:
        dr = 2.0 * math.pi / (points_per_wavelength * R * (1.0 + eps_prime))
    half = int(math.ceil(manifold.r1 / dr * (1.0 - 1e-12)))
    return manifold.r1 / half, half


def frequency_window(manifold: Manifold, R: float, eps_prime: float, dr: float | None = None,
                     vectors: bool = False, k_extra: int = 0, keep_modes: int | None = None) -> WindowedBasis:
    """Window of B = [-r1, r1] Dirichlet eigenpairs for all modes that can reach it.

    Counting uses Sturm sequences; eigenpairs (and vectors when requested, for
    modes |k| <= keep_modes) come from tridiagonal solves.
    """
    _check_d2(manifold)
    if eps_prime < 0:
        raise ValueError("eps_prime must be nonnegative")
    step, half = b_grid(manifold, R, eps_prime, dr=dr)
    lo, hi = (R * (1 - eps_prime)) ** 2, (R * (1 + eps_prime)) ** 2
    kmax = max_mode(manifold, R, eps_prime) + k_extra
    ks, js, fs = [], [], []
    bases = {}
    for k in range(kmax + 1):
        op = mode_operator_spacing(manifold, k, half, step)
        d, e = op.tridiagonal()
        n_lo = int(_sturm(d, e, lo))
        n_hi = int(_sturm(d, e, hi))
        if n_hi == n_lo:
            continue
        keep = vectors and (keep_modes is None or k <= keep_modes)
        basis = dirichlet_eigensystem(op, index_range=(n_lo, n_hi - 1), vectors=keep)
        if keep:
            bases[k] = basis
        for sgn in ((1,) if k == 0 else (1, -1)):
            ks.append(np.full(basis.values.size, sgn * k))
            js.append(basis.j)
            fs.append(basis.frequencies)
    if not ks:
        return WindowedBasis(R, eps_prime, np.empty(0, int), np.empty(0, int), np.empty(0), kmax, step, bases)
    return WindowedBasis(R, eps_prime, np.concatenate(ks), np.concatenate(js), np.concatenate(fs), kmax, step, bases)


# ---------------------------------------------------------------- cutoffs


def bump(r, radius: float) -> np.ndarray:
    """exp(1 - 1 / (1 - (r / radius)^2)) on |r| < radius, zero elsewhere."""
    x = np.asarray(r, dtype=float) / radius
    out = np.zeros_like(x)
    m = np.abs(x) < 1.0
    out[m] = np.exp(1.0 - 1.0 / (1.0 - x[m] ** 2))
    return out


@dataclass(frozen=True)
class Cutoff:
    """Radial cutoff psi in C_c^infty(B interior); default a bump of radius 0.8 r1."""

    radius: float

    @classmethod
    def default(cls, manifold: Manifold) -> "Cutoff":
        return cls(0.8 * manifold.r1)

    def __call__(self, r) -> np.ndarray:
        return bump(r, self.radius)

    def check(self, manifold: Manifold) -> "Cutoff":
        if not 0 < self.radius < manifold.r1:
            raise ValueError("cutoff support must lie inside (-r1, r1)")
        return self


# ---------------------------------------------------------------- propagation


def horizon(L: float, r1: float, margin: float = 1.0) -> float:
    """Time up to which Dirichlet truncation at +-L is invisible from B."""
    return 2.0 * (L - r1) - margin


def domain_half_length(r1: float, t_max: float) -> float:
    return r1 + 0.5 * t_max + 1.0


@dataclass(frozen=True)
class ModePropagator:
    """Exact spectral half-wave group of one mode operator (full eigenbasis)."""

    basis: EigenBasis
    t_valid: float

    def coefficients(self, f: np.ndarray) -> np.ndarray:
        return self.basis.dr * (self.basis.vectors.T @ f)

    def synthesize(self, c: np.ndarray) -> np.ndarray:
        return self.basis.vectors @ c

    def apply(self, c: np.ndarray, t: float) -> np.ndarray:
        return half_wave_apply(self, c, t)


def build_mode_propagator(manifold: Manifold, k: int, L: float, n_grid: int, r1: float | None = None,
                          margin: float = 1.0) -> ModePropagator:
    op = build_mode_operator(manifold, k, L, n_grid)
    rb = manifold.r1 if r1 is None else r1
    return ModePropagator(dirichlet_eigensystem(op), horizon(L, rb, margin))


def half_wave_apply(plan: ModePropagator, coeffs: np.ndarray, t: float) -> np.ndarray:
    """Multiply eigen-coefficients by exp(-i t sqrt(mu))."""
    if t < 0 or t > plan.t_valid:
        raise HorizonError(f"t = {t} outside [0, {plan.t_valid}] (finite-speed horizon)")
    phase = np.exp(-1j * t * plan.basis.frequencies)
    return phase[:, None] * coeffs if np.ndim(coeffs) == 2 else phase * coeffs


def embed_and_measure(plan: ModePropagator, r_big: np.ndarray, u_big: np.ndarray, psi: np.ndarray,
                      t: float, r1: float) -> float:
    """||psi U(t) psi u|| (flat grid L^2) for a datum already placed on the big grid."""
    outside = np.abs(r_big) >= r1
    if np.any(psi[outside] != 0.0):
        raise ValueError("psi must vanish outside (-r1, r1)")
    c = plan.coefficients(psi * u_big)
    v = plan.synthesize(half_wave_apply(plan, c, t))
    return float(math.sqrt(plan.basis.dr * np.sum(np.abs(psi * v) ** 2)))


# ---------------------------------------------------------------- window propagation


@dataclass(frozen=True)
class PropagatorPlan:
    """Everything needed to evolve psi * E_R exactly on [-L, L] up to t_valid.

    The big-domain eigenbasis of each mode is kept only on the energy band
    mu in [R^2 (1 - eps_energy), R^2 (1 + eps_energy)], which must nest the
    window; each block reports the part of ||psi e||^2 the band misses.
    Modes beyond ``k_psi`` have window states that are classically forbidden
    on supp psi and are dropped from the propagation (they still count in N_R
    and in the random-state normalisation).
    """

    manifold: Manifold
    R: float
    eps_prime: float
    eps_energy: float
    cutoff: Cutoff
    dr: float
    half_b: int
    half_big: int
    t_valid: float
    window: WindowedBasis
    k_psi: int

    @property
    def L(self) -> float:
        return self.half_big * self.dr

    @property
    def N(self) -> int:
        return self.window.N

    def describe(self) -> dict:
        return {"R": self.R, "eps_prime": self.eps_prime, "eps_energy": self.eps_energy,
                "dr": self.dr, "L": self.L, "t_valid": self.t_valid, "N_R": self.N,
                "k_max": self.window.k_max, "k_psi": self.k_psi,
                "grid_points_big": 2 * self.half_big - 1, "grid_points_B": 2 * self.half_b - 1,
                "cutoff_radius": self.cutoff.radius}

    def key(self, k: int) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(self.manifold.digest.encode())
        h.update(np.array([self.R, self.eps_prime, self.eps_energy, self.dr, self.cutoff.radius,
                           float(self.half_b), float(self.half_big), float(k)]).tobytes())
        return h.hexdigest()[:24]


def build_plan(manifold: Manifold, R: float, eps_prime: float, t_max: float, cutoff: Cutoff | None = None,
               eps_energy: float = 0.45, dr: float | None = None, margin: float = 1.0,
               psi_mode_margin: int = 4) -> PropagatorPlan:
    _check_d2(manifold)
    cutoff = (cutoff or Cutoff.default(manifold)).check(manifold)
    if (1 + eps_prime) ** 2 >= 1 + eps_energy or (1 - eps_prime) ** 2 <= 1 - eps_energy:
        raise ValueError("energy band must contain the frequency window")
    step, half_b = b_grid(manifold, R, eps_prime, dr=dr)
    L = domain_half_length(manifold.r1, t_max)
    half_big = half_b + int(math.ceil((L - manifold.r1) / step))
    t_valid = horizon(half_big * step, manifold.r1, margin)
    if t_valid < t_max:
        raise HorizonError("domain too short for t_max")
    window = frequency_window(manifold, R, eps_prime, dr=step)
    if window.N == 0:
        raise ValueError(f"empty frequency window at R = {R}")
    k_psi = min(max_mode(manifold, R, eps_prime, extent=cutoff.radius) + psi_mode_margin, window.k_max)
    return PropagatorPlan(manifold, float(R), float(eps_prime), float(eps_energy), cutoff, step, half_b,
                          half_big, t_valid, window, int(k_psi))


def parity_tridiagonal(op: ModeOperator, parity: int) -> tuple[np.ndarray, np.ndarray]:
    """Even (parity 0) or odd (1) block of a mode operator on a grid symmetric about r = 0.

    Coordinates are y_0 = x_0, y_i = sqrt(2) x_i for the right half, which
    keeps the block symmetric and the flat inner product unchanged.
    """
    d, e = op.tridiagonal()
    c = (op.n - 1) // 2
    if op.n % 2 == 0 or op.r[c] != 0.0:
        raise ValueError("parity split needs a grid centred on r = 0")
    if parity == 0:
        e = e[c:].copy()
        e[0] *= math.sqrt(2.0)
        return d[c:].copy(), e
    return d[c + 1:].copy(), e[c + 1:].copy()


def parity_eigensystem(op: ModeOperator, parity: int, value_range: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of one parity block inside value_range; vectors in half coordinates, dr-normalised."""
    d, e = parity_tridiagonal(op, parity)
    lo, hi = value_range
    if int(_sturm(d, e, float(hi))) == int(_sturm(d, e, float(lo))):
        return np.empty(0), np.empty((d.size, 0))
    w, v = linalg.eigh_tridiagonal(d, e, select="v", select_range=(lo, hi), lapack_driver="stemr")
    v = v / math.sqrt(op.dr)
    sgn = np.sign(v[np.argmax(np.abs(v) > 1e-3 * np.abs(v).max(axis=0), axis=0), np.arange(v.shape[1])])
    return w, v * np.where(sgn == 0, 1.0, sgn)[None, :]


def half_to_full(y: np.ndarray, parity: int) -> np.ndarray:
    """Map half-coordinate vectors (rows = right half grid) back to the full symmetric grid."""
    y = np.asarray(y)
    if parity == 0:
        right = y.copy()
        right[1:] /= math.sqrt(2.0)
        return np.concatenate([right[:0:-1], right], axis=0)
    right = y / math.sqrt(2.0)
    zero = np.zeros((1,) + y.shape[1:])
    return np.concatenate([-right[::-1], zero, right], axis=0)


@dataclass(frozen=True)
class ParityBlock:
    band_freq: np.ndarray
    C: np.ndarray
    G: np.ndarray
    psi_mass: np.ndarray

    @property
    def leakage(self) -> np.ndarray:
        """||psi e||^2 not captured by the energy band (window vectors have unit norm)."""
        return self.psi_mass - np.sum(self.C * self.C, axis=0)


@dataclass(frozen=True)
class ModeReduction:
    """Per-mode data for evolving psi e_j, split into even and odd blocks.

    In each block C[:, j] are big-band coefficients of psi e_j and
    G = Phi^T diag(psi^2 dr) Phi, so that
    ||psi U(t) psi sum_j a_j e_j||^2 = a^H C^T D(t)^* G D(t) C a with D(t) = exp(-i t freq).
    """

    k: int
    blocks: tuple[ParityBlock, ParityBlock]
    window_freq: np.ndarray

    @property
    def n_window(self) -> int:
        return sum(b.C.shape[1] for b in self.blocks)

    @property
    def max_leakage(self) -> float:
        vals = [float(b.leakage.max()) for b in self.blocks if b.C.shape[1]]
        return max(vals) if vals else 0.0


def reduce_mode(plan: PropagatorPlan, k: int) -> ModeReduction:
    m = plan.manifold
    R = plan.R
    b_op = mode_operator_spacing(m, k, plan.half_b, plan.dr)
    big_op = mode_operator_spacing(m, k, plan.half_big, plan.dr)
    win_rng = ((R * (1 - plan.eps_prime)) ** 2, (R * (1 + plan.eps_prime)) ** 2)
    band_rng = (R * R * (1 - plan.eps_energy), R * R * (1 + plan.eps_energy))
    rows = int(math.ceil(plan.cutoff.radius / plan.dr))  # psi vanishes from this half-grid row on
    blocks = []
    freqs = []
    for par in (0, 1):
        off = par
        rr = plan.dr * np.arange(off, rows)
        psi = plan.cutoff(rr)
        w_vals, w_vec = parity_eigensystem(b_op, par, win_rng)
        pe = psi[:, None] * w_vec[: rows - off]
        psi_mass = plan.dr * np.sum(pe * pe, axis=0)
        b_vals, b_vec = parity_eigensystem(big_op, par, band_rng)
        phi = b_vec[: rows - off]
        C = plan.dr * (phi.T @ pe)
        B = phi * (psi * math.sqrt(plan.dr))[:, None]
        blocks.append(ParityBlock(np.sqrt(b_vals), C, B.T @ B, psi_mass))
        freqs.append(np.sqrt(w_vals))
    return ModeReduction(int(k), (blocks[0], blocks[1]), np.concatenate(freqs))


def mode_stream_key(trial: int, k: int) -> tuple[int, int]:
    return (int(trial), 2 * abs(int(k)) + (1 if k < 0 else 0))


def mode_coefficients(seed: int, trials: int, k: int, n: int) -> np.ndarray:
    """Complex Gaussian amplitudes (n x trials) of signed mode k, one substream per (trial, k)."""
    out = np.empty((n, trials), dtype=complex)
    for i in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=mode_stream_key(i, k)))
        z = rng.standard_normal((2, n))
        out[:, i] = (z[0] + 1j * z[1]) * math.sqrt(0.5)
    return out


@dataclass(frozen=True)
class WindowEvolution:
    """Squared norms of psi U(t) psi on the window: HS^2 and per-trial ||.||^2."""

    t: np.ndarray
    hs2: np.ndarray
    trial_norm2: np.ndarray | None
    N: int
    plan: dict
    max_leakage: float
    modes_propagated: int

    @property
    def normalized_hs2(self) -> np.ndarray:
        return self.hs2 / self.N


def _block_forms(blk: ParityBlock, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of C^T D(t)^* G D(t) C."""
    ph = blk.band_freq * t
    cc = np.cos(ph)[:, None] * blk.C
    cs = np.sin(ph)[:, None] * blk.C
    gc = blk.G @ cc
    hr = cc.T @ gc + cs.T @ (blk.G @ cs)
    a = cs.T @ gc
    return hr, a - a.T


def _mode_contrib(plan: PropagatorPlan, red: ModeReduction, t: np.ndarray, seed: int | None, trials: int):
    n_w = red.n_window
    hs = np.zeros(t.size)
    tr = np.zeros((trials, t.size))
    signs = (1,) if red.k == 0 else (1, -1)
    amps = [mode_coefficients(seed, trials, s * red.k, n_w) for s in signs] if trials else []
    n_even = red.blocks[0].C.shape[1]
    for i, ti in enumerate(t):
        for par, blk in enumerate(red.blocks):
            if blk.C.shape[1] == 0:
                continue
            hr, hi = _block_forms(blk, ti)
            hs[i] += len(signs) * float(np.trace(hr))
            if trials:
                H = hr + 1j * hi
                sl = slice(0, n_even) if par == 0 else slice(n_even, n_w)
                for amp in amps:
                    x = amp[sl]
                    tr[:, i] += np.real(np.einsum("ij,ij->j", x.conj(), H @ x))
    return hs, tr, red.max_leakage


def _norm2_of_mode(seed: int, trials: int, k: int, n: int) -> np.ndarray:
    tot = np.zeros(trials)
    for s in ((1,) if k == 0 else (1, -1)):
        a = mode_coefficients(seed, trials, s * k, n)
        tot += np.sum(np.abs(a) ** 2, axis=0)
    return tot


def _mode_job(args):
    plan, k, t, seed, trials, cache = args
    red = None
    if cache is not None:
        red = cache.load_reduction(plan, k)
    if red is None:
        red = reduce_mode(plan, k)
        if cache is not None:
            cache.store_reduction(plan, red)
    hs, tr, cap = _mode_contrib(plan, red, t, seed, trials)
    norm2 = _norm2_of_mode(seed, trials, k, red.n_window) if trials else None
    return hs, tr, cap, norm2


def evolve_window(plan: PropagatorPlan, t_grid, trials: int = 0, seed: int | None = None,
                  workers: int = 1, cache=None) -> WindowEvolution:
    """Exact HS norms (and optional random-trial norms) of psi U(t) psi on E_R."""
    t = np.asarray(t_grid, dtype=float)
    if np.any(t < 0) or np.any(t > plan.t_valid):
        raise HorizonError(f"times must lie in [0, {plan.t_valid}]")
    if trials and seed is None:
        raise ValueError("seed required for random trials")
    counts = plan.window.mode_counts()
    modes = sorted({abs(k) for k in counts})
    prop_modes = [k for k in modes if k <= plan.k_psi]
    jobs = [(plan, k, t, seed, trials, cache) for k in prop_modes]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_mode_job, jobs))
    else:
        parts = [_mode_job(j) for j in jobs]
    hs2 = np.zeros(t.size)
    tr = np.zeros((trials, t.size))
    total = np.zeros(trials)
    leak = 0.0
    for hs, trc, c, n2 in parts:
        hs2 += hs
        tr += trc
        leak = max(leak, c)
        if trials:
            total += n2
    if trials:
        for k in modes:
            if k > plan.k_psi:
                total += _norm2_of_mode(seed, trials, k, counts[k])
        tr = tr / total[:, None]
    return WindowEvolution(t, hs2, tr if trials else None, plan.N, plan.describe(), leak, len(prop_modes))


def hs_norm_cutoff_propagator(plan: PropagatorPlan, t_grid, workers: int = 1, cache=None) -> WindowEvolution:
    """||psi U(t) psi Pi_R||_HS^2 summed over the window basis (and / N_R via normalized_hs2)."""
    return evolve_window(plan, t_grid, 0, None, workers, cache)


# ---------------------------------------------------------------- cache and export

CACHE_MAGIC = b"TRAPWAVE"
CACHE_VERSION = 1


def write_container(path, arrays: dict[str, np.ndarray]) -> None:
    """Flat binary container: magic, version, then (name, dtype, shape, raw bytes) records."""
    import struct
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", CACHE_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            nb, dt = name.encode(), arr.dtype.str.encode()
            fh.write(struct.pack("<II", len(nb), len(dt)))
            fh.write(nb + dt)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def read_container(path) -> dict[str, np.ndarray]:
    import struct
    with open(path, "rb") as fh:
        if fh.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
            raise ValueError(f"{path} is not a trapwave cache file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CACHE_VERSION:
            raise ValueError(f"cache version {version} != {CACHE_VERSION}")
        out = {}
        for _ in range(count):
            ln, ld = struct.unpack("<II", fh.read(8))
            name = fh.read(ln).decode()
            dt = np.dtype(fh.read(ld).decode())
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            out[name] = np.frombuffer(fh.read(n), dtype=dt).reshape(shape).copy()
        return out


class PlanCache:
    """Per-mode reductions on disk, keyed by profile digest, grid, window and mode."""

    def __init__(self, root):
        from pathlib import Path
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, plan: PropagatorPlan, k: int):
        return self.root / f"mode-{plan.key(k)}.bin"

    def store_reduction(self, plan: PropagatorPlan, red: ModeReduction) -> None:
        arrays = {"k": np.array([red.k]), "window_freq": red.window_freq}
        for par, blk in enumerate(red.blocks):
            arrays.update({f"{par}_band_freq": blk.band_freq, f"{par}_C": blk.C, f"{par}_G": blk.G,
                           f"{par}_psi_mass": blk.psi_mass})
        tmp = self.path(plan, red.k).with_suffix(".tmp")
        write_container(tmp, arrays)
        tmp.replace(self.path(plan, red.k))

    def load_reduction(self, plan: PropagatorPlan, k: int) -> ModeReduction | None:
        p = self.path(plan, k)
        if not p.exists():
            return None
        a = read_container(p)
        blocks = tuple(ParityBlock(a[f"{par}_band_freq"], a[f"{par}_C"], a[f"{par}_G"], a[f"{par}_psi_mass"])
                       for par in (0, 1))
        return ModeReduction(int(a["k"][0]), blocks, a["window_freq"])


def eigenvalue_table_csv(window: WindowedBasis, path, header: str | None = None) -> None:
    """(k, j, lambda) rows of a frequency window."""
    import csv
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["k", "j", "lambda"])
        for k, j, f in zip(window.k, window.j, window.freq):
            w.writerow([int(k), int(j), repr(float(f))])
