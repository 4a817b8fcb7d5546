"""Independent reference computations used by the test-suite.

Nothing here calls the package's integrators or eigensolvers; each function
recomputes a quantity from first principles (closed forms, plain RK4,
FFT, scipy's generic solvers) so tests can compare two routes.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate, linalg, stats


# ---------------------------------------------------------------- closed forms


def interval_dirichlet(length: float, j) -> np.ndarray:
    """Eigenvalues (j pi / length)^2 of -d^2/dr^2 on an interval with Dirichlet ends."""
    return (np.asarray(j, dtype=float) * math.pi / length) ** 2


def linear_saddle_jacobian(lam: float, T: float) -> np.ndarray:
    """Flow map of dr = rho, drho = lam^2 r over time T."""
    c, s = math.cosh(lam * T), math.sinh(lam * T)
    return np.array([[c, s / lam], [lam * s, c]])


def projector_tail(N: int, m: float) -> float:
    """P(N |a_1|^2 > m^2) for a uniform unit vector in C^N: (1 - m^2/N)^(N-1)."""
    x = 1.0 - m * m / N
    return 0.0 if x <= 0 else x ** (N - 1)


def sphere_marginal_cdf(N: int):
    """CDF of |a_1|^2 for a uniform point on the unit sphere of C^N (Beta(1, N-1))."""
    return stats.beta(1, N - 1).cdf


# ---------------------------------------------------------------- geodesics


def _rk4(f, y, dt, steps):
    for _ in range(steps):
        k1 = f(y)
        k2 = f(y + 0.5 * dt * k1)
        k3 = f(y + 0.5 * dt * k2)
        k4 = f(y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def full_geodesic_rk4(profile, r, theta, rho, eta, t: float, dt: float = 0.01) -> np.ndarray:
    """Cogeodesic flow of H = (rho^2 + eta^2 / alpha^2) / 2 in all four surface coordinates.

    Returns the state array (4, n) at time t.  Plain fixed-step RK4, vectorised.
    """

    def f(y):
        a, d1, _ = profile(y[0])
        return np.array([y[2], y[3] / a**2, y[3] ** 2 * d1 / a**3, np.zeros_like(y[0])])

    y = np.array([r, theta, rho, eta], dtype=float)
    steps = int(math.ceil(t / dt))
    return _rk4(f, y, t / steps, steps)


def full_coordinate_volume(profile, r1: float, t: float, n: int, seed: int, dt: float = 0.02):
    """V(t) for d = 2 from uniform samples of the unit cosphere bundle over {|r| <= r1}.

    Points: area element alpha(r) dr dtheta by rejection, direction angle phi uniform.
    Returns (V, ci95).
    """
    rng = np.random.default_rng(seed)
    grid = np.linspace(-r1, r1, 4001)
    amax = float(np.max(profile.alpha(grid)))
    rs = []
    while sum(x.size for x in rs) < n:
        cand = rng.uniform(-r1, r1, 2 * n)
        keep = rng.uniform(0, amax, 2 * n) < profile.alpha(cand)
        rs.append(cand[keep])
    r = np.concatenate(rs)[:n]
    theta = rng.uniform(0, 2 * math.pi, n)
    phi = rng.uniform(0, 2 * math.pi, n)
    a = profile.alpha(r)
    y = full_geodesic_rk4(profile, r, theta, np.cos(phi), a * np.sin(phi), t, dt)
    inside = np.abs(y[0]) <= r1
    area = 2 * math.pi * integrate.quad(lambda x: profile.alpha(x), -r1, r1, limit=200, points=[-4, -2, 2, 4])[0]
    total = area * 2 * math.pi
    f = inside.mean()
    return total * f, 1.96 * total * math.sqrt(f * (1 - f) / n)


def radial_exit_time(profile, r0: float, rho0: float, r_ball: float, t_cap: float) -> float:
    """Forward exit time from |r| <= r_ball by scipy's generic integrator (reduced flow, unit shell)."""
    a0 = profile.alpha(r0)
    p0 = a0 * a0 * (1 - rho0 * rho0)

    def rhs(_, y):
        a, d1, _ = profile(y[0])
        return [y[1], p0 * d1 / a**3]

    ev = lambda _, y: abs(y[0]) - r_ball
    ev.terminal = True
    sol = integrate.solve_ivp(rhs, (0, t_cap), [r0, rho0], method="Radau", rtol=1e-11, atol=1e-14, events=ev)
    return float(sol.t_events[0][0]) if sol.t_events[0].size else math.inf


def sweep_escape_rate(profile, r_ball: float, rho_grid) -> tuple[float, np.ndarray]:
    """Rate lambda from exit times of states (r=0, rho) across the stable direction.

    Near a hyperbolic orbit the exit time grows like log(1/rho) / lambda.
    """
    rho_grid = np.asarray(rho_grid, dtype=float)
    tau = np.array([radial_exit_time(profile, 0.0, x, r_ball, 200.0) for x in rho_grid])
    slope = np.polyfit(-np.log(rho_grid), tau, 1)[0]
    return 1.0 / slope, tau


# ---------------------------------------------------------------- spectral


def divergence_form_eigenvalues(profile, k: int, half_length: float, n: int, count: int) -> np.ndarray:
    """Lowest eigenvalues of -(1/alpha)(alpha f')' + k^2 f / alpha^2 with weight alpha dr.

    Conservative finite differences (alpha at half points), Dirichlet at +-half_length.
    """
    h = 2 * half_length / (n + 1)
    r = -half_length + h * np.arange(1, n + 1)
    rh = -half_length + h * (np.arange(n + 1) + 0.5)
    a = profile.alpha(r)
    ah = profile.alpha(rh)
    diag = (ah[:-1] + ah[1:]) / h**2 + k * k / a
    off = -ah[1:-1] / h**2
    s = 1.0 / np.sqrt(a)
    return linalg.eigh_tridiagonal(diag * s * s, off * s[:-1] * s[1:], eigvals_only=True,
                                   select="i", select_range=(0, count - 1))


def free_half_wave(x: np.ndarray, u0: np.ndarray, t: float) -> np.ndarray:
    """exp(-i t |D|) on the line via FFT of samples on an equispaced (long) grid."""
    h = x[1] - x[0]
    xi = 2 * math.pi * np.fft.fftfreq(x.size, d=h)
    return np.fft.ifft(np.fft.fft(u0) * np.exp(-1j * t * np.abs(xi)))


def wave_packet(x, centre: float, width: float, freq: float) -> np.ndarray:
    return np.exp(-0.5 * ((x - centre) / width) ** 2 + 1j * freq * x)


# ---------------------------------------------------------------- statistics


def exchangeable_mean(samples: np.ndarray) -> tuple[float, float]:
    return float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(samples.size))
