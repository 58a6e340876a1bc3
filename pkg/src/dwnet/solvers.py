"""Pseudo-spectral generators for the two periodic benchmark systems.

Both solvers live on a doubly periodic (0, 2pi)^2 grid and integrate with a
classical integrating-factor RK4: the stiff linear terms (viscosity + drag,
or hyperdiffusion) are treated exactly in Fourier space and the remaining
terms explicitly.  Quadratic products are evaluated in physical space with
2/3-rule dealiasing (modes with |k| above two thirds of Nyquist are zeroed
after every step).  States are half-spectra (rfft2), so conjugate symmetry
and real fields hold by construction.

Forced 2D turbulence (vorticity form):
    dw/dt + u . grad(w) = (1/Re) lap(w) - f0 cos(f0 x) - drag * w
    u from the streamfunction: lap(psi) = -w, u = (dpsi/dy, -dpsi/dx)

Drift-wave plasma turbulence, evolved fields n (density) and Om = lap(phi):
    dn/dt  + {phi, n}  + kappa dphi/dy = alpha (phi - n) - Dn lap^2(n)
    dOm/dt + {phi, Om}                 = alpha (phi - n) - Dp lap^2(Om)
    {A, B} = A_x B_y - A_y B_x,  phi recovered from Om with the k=0 mode
    gauged to zero.  Note {phi, X} = u . grad(X) with u = (-phi_y, phi_x).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from math import ceil, pi

import numpy as np

KOLMOGOROV = "kolmogorov"
HASEGAWA_WAKATANI = "hasegawa_wakatani"


class CflError(RuntimeError):
    pass


class SolverBlowUp(RuntimeError):
    def __init__(self, frame_index: int):
        super().__init__(f"solver state went non-finite; last valid frame {frame_index}")
        self.frame_index = frame_index


@dataclass
class SolverConfig:
    system: str
    grid: int = 64
    frames: int = 160
    warmup_frames: int = 0
    output_dt: float = 1.0
    dt: float | None = None          # internal step; None -> 0.5x CFL from the IC
    seed: int = 0
    domain: float = 2 * pi           # square box side length
    ic_amplitude: float = 1.0
    ic_gamma: float = 2.5            # isotropic IC power ~ (k^2 + tau^2)^(-gamma)
    ic_tau: float = 3.0
    velocity_floor: float = 1.0      # lower bound on the CFL velocity estimate
    # forced-turbulence parameters
    reynolds: float = 1000.0
    forcing_k: int = 8
    drag: float = 0.1
    # drift-wave parameters
    alpha: float = 0.01
    kappa: float = 0.5
    diff_n: float = 1e-4
    diff_p: float = 1e-4

    def validate(self):
        if self.grid < 8 or self.grid & (self.grid - 1):
            raise ValueError(f"grid must be a power of two >= 8, got {self.grid}")
        if self.system not in (KOLMOGOROV, HASEGAWA_WAKATANI):
            raise ValueError(f"unknown system {self.system!r}")
        if self.frames < 1:
            raise ValueError("need at least one output frame")
        if self.domain <= 0:
            raise ValueError("domain must be positive")


def kolmogorov_config(**kw) -> SolverConfig:
    kw.setdefault("output_dt", 1.0 / 16.0)
    cfg = SolverConfig(system=KOLMOGOROV, **kw)
    if "velocity_floor" not in kw:
        # laminar velocity scale of the forced equilibrium, with margin
        u_lam = 1.0 / (cfg.forcing_k ** 2 / cfg.reynolds + cfg.drag)
        cfg = replace(cfg, velocity_floor=1.3 * u_lam)
    return cfg


def hasegawa_wakatani_config(**kw) -> SolverConfig:
    # standard drift-wave box: smallest wavenumber 0.15, so low-k modes stay
    # adiabatically damped and the inverse cascade saturates
    kw.setdefault("output_dt", 1.0)
    kw.setdefault("velocity_floor", 6.0)
    kw.setdefault("domain", 2 * pi / 0.15)
    return SolverConfig(system=HASEGAWA_WAKATANI, **kw)


class _SpectralGrid:
    """Half-spectrum wavenumber bookkeeping for an n x n periodic box."""

    def __init__(self, n: int, length: float = 2 * pi):
        self.n = n
        self.length = length
        k0 = 2 * pi / length
        iy = (np.fft.fftfreq(n) * n)[:, None]
        ix = (np.fft.rfftfreq(n) * n)[None, :]
        self.ky = k0 * iy
        self.kx = k0 * ix
        self.k2 = self.kx ** 2 + self.ky ** 2
        self.k2_safe = self.k2.copy()
        self.k2_safe[0, 0] = k0 * k0
        # 2/3 of Nyquist, radial in index space: keep |i| <= n/3
        self.dealias = (9.0 * (ix ** 2 + iy ** 2)) <= n * n
        self.dx = length / n
        # Parseval weights: interior kx columns represent conjugate pairs
        w = np.full(ix.shape[1], 2.0)
        w[0] = 1.0
        if n % 2 == 0:
            w[-1] = 1.0
        self._pweight = w[None, :]

    def fwd(self, f):
        return np.fft.rfft2(f)

    def inv(self, f_hat):
        return np.fft.irfft2(f_hat, s=(self.n, self.n))

    def ddx(self, f_hat):
        return 1j * self.kx * f_hat

    def ddy(self, f_hat):
        return 1j * self.ky * f_hat

    def spec_mean_sq(self, f_hat) -> float:
        """Mean of f^2 over the grid, evaluated spectrally."""
        return float((self._pweight * np.abs(f_hat) ** 2).sum()) / self.n ** 4


def gaussian_random_field(n: int, seed: int, gamma: float = 2.5,
                          tau: float = 3.0) -> np.ndarray:
    """Zero-mean, unit-variance real field with isotropic power
    ~ (|k|^2 + tau^2)^(-gamma); deterministic per seed."""
    rng = np.random.default_rng(seed)
    ky = (np.fft.fftfreq(n) * n)[:, None]
    kx = (np.fft.fftfreq(n) * n)[None, :]
    k2 = kx ** 2 + ky ** 2
    white = rng.standard_normal((n, n))
    shaped = np.fft.fft2(white) * (k2 + tau * tau) ** (-gamma / 2.0)
    shaped[0, 0] = 0.0
    f = np.fft.ifft2(shaped).real
    f -= f.mean()
    return f / f.std()


def _if_rk4(state, lin, nonlin, dt):
    """One integrating-factor RK4 step of d(state)/dt = lin*state + nonlin(state).

    `state` and `lin` are arrays (lin diagonal in Fourier space and possibly
    stacked over fields); `nonlin` maps state to the explicit tendency.
    """
    e1 = np.exp(lin * (dt / 2.0))
    e2 = e1 * e1
    a = dt * nonlin(state)
    b = dt * nonlin(e1 * (state + 0.5 * a))
    c = dt * nonlin(e1 * state + 0.5 * b)
    d = dt * nonlin(e2 * state + e1 * c)
    return e2 * state + (e2 * a + 2.0 * e1 * (b + c) + d) / 6.0


def poisson_bracket(a: np.ndarray, b: np.ndarray,
                    domain: float = 2 * pi) -> np.ndarray:
    """{a, b} = a_x b_y - a_y b_x on a periodic square grid, dealiased."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    g = _SpectralGrid(a.shape[0], domain)
    ah = g.fwd(a)
    bh = g.fwd(b)
    ax, ay = g.inv(g.ddx(ah)), g.inv(g.ddy(ah))
    bx, by = g.inv(g.ddx(bh)), g.inv(g.ddy(bh))
    return g.inv(g.fwd(ax * by - ay * bx) * g.dealias)


class KolmogorovSolver:
    """Vorticity-form forced turbulence on (0, 2pi)^2."""

    def __init__(self, cfg: SolverConfig):
        cfg.validate()
        self.cfg = cfg
        if abs(cfg.forcing_k * cfg.domain / (2 * pi) % 1.0) > 1e-9:
            raise ValueError("forcing wavelength must fit the periodic box")
        self.grid = _SpectralGrid(cfg.grid, cfg.domain)
        g = self.grid
        self.lin = -(g.k2 / cfg.reynolds + cfg.drag)
        x = cfg.domain * np.arange(cfg.grid) / cfg.grid
        forcing = -cfg.forcing_k * np.cos(cfg.forcing_k * x)[None, :] \
            * np.ones((cfg.grid, 1))
        self.forcing_hat = g.fwd(forcing) * g.dealias
        self.w_hat = np.zeros(g.k2.shape, np.complex128)
        self.time = 0.0

    def set_vorticity(self, w: np.ndarray) -> None:
        self.w_hat = self.grid.fwd(np.asarray(w, np.float64)) * self.grid.dealias

    def vorticity(self) -> np.ndarray:
        return self.grid.inv(self.w_hat)

    def velocity_hat(self, w_hat=None):
        g = self.grid
        if w_hat is None:
            w_hat = self.w_hat
        psi = w_hat / g.k2_safe
        psi[0, 0] = 0.0
        return g.ddy(psi), -g.ddx(psi)

    def velocity(self):
        u_hat, v_hat = self.velocity_hat()
        return self.grid.inv(u_hat), self.grid.inv(v_hat)

    def max_speed(self) -> float:
        u, v = self.velocity()
        return float(max(np.abs(u).max(), np.abs(v).max()))

    def _nonlinear(self, w_hat):
        g = self.grid
        u_hat, v_hat = self.velocity_hat(w_hat)
        u, v, wx, wy = g.inv(np.stack([u_hat, v_hat, g.ddx(w_hat), g.ddy(w_hat)]))
        adv = g.fwd(u * wx + v * wy) * g.dealias
        return -adv + self.forcing_hat

    def step(self, dt: float) -> None:
        speed = self.max_speed()
        if speed * dt / self.grid.dx > 1.0:
            raise CflError(f"CFL violated: max|u|={speed:.3g}, dt={dt:.3g}; "
                           f"suggested dt <= {0.5 * self.grid.dx / speed:.3g}")
        self.w_hat = _if_rk4(self.w_hat, self.lin, self._nonlinear, dt)
        self.w_hat *= self.grid.dealias
        self.time += dt

    def fields(self) -> np.ndarray:
        return self.vorticity()[None]

    field_names = ("vorticity",)

    def energy(self) -> float:
        u_hat, v_hat = self.velocity_hat()
        return 0.5 * (self.grid.spec_mean_sq(u_hat) + self.grid.spec_mean_sq(v_hat))

    def enstrophy(self) -> float:
        return 0.5 * self.grid.spec_mean_sq(self.w_hat)

    def divergence_norm(self) -> float:
        g = self.grid
        u_hat, v_hat = self.velocity_hat()
        div = g.ddx(u_hat) + g.ddy(v_hat)
        ref = float(np.abs(u_hat).max()) + float(np.abs(v_hat).max())
        return float(np.abs(div).max()) / max(ref, 1e-300)


class HasegawaWakataniSolver:
    """Two-field drift-wave turbulence; evolves density and vorticity spectra."""

    def __init__(self, cfg: SolverConfig):
        cfg.validate()
        self.cfg = cfg
        self.grid = _SpectralGrid(cfg.grid, cfg.domain)
        g = self.grid
        k4 = g.k2 ** 2
        self.lin = np.stack([-cfg.diff_n * k4, -cfg.diff_p * k4])
        self.state = np.zeros((2,) + g.k2.shape, np.complex128)  # (n, Om)
        self.time = 0.0

    def set_fields(self, n: np.ndarray, phi: np.ndarray) -> None:
        g = self.grid
        n_hat = g.fwd(np.asarray(n, np.float64)) * g.dealias
        phi_hat = g.fwd(np.asarray(phi, np.float64)) * g.dealias
        self.state = np.stack([n_hat, -g.k2 * phi_hat])

    def phi_hat(self, om_hat=None):
        g = self.grid
        if om_hat is None:
            om_hat = self.state[1]
        phi = -om_hat / g.k2_safe
        phi[0, 0] = 0.0
        return phi

    def density(self) -> np.ndarray:
        return self.grid.inv(self.state[0])

    def potential(self) -> np.ndarray:
        return self.grid.inv(self.phi_hat())

    def max_speed(self) -> float:
        g = self.grid
        ph = self.phi_hat()
        u = g.inv(-g.ddy(ph))
        v = g.inv(g.ddx(ph))
        return float(max(np.abs(u).max(), np.abs(v).max()))

    def _nonlinear(self, state):
        g = self.grid
        cfg = self.cfg
        n_hat, om_hat = state
        phi_hat = self.phi_hat(om_hat)
        # {phi, X} = u . grad X with the ExB velocity u = (-phi_y, phi_x)
        u, v, nx, ny, ox, oy = g.inv(np.stack([
            -g.ddy(phi_hat), g.ddx(phi_hat), g.ddx(n_hat), g.ddy(n_hat),
            g.ddx(om_hat), g.ddy(om_hat)]))
        br_n, br_o = g.fwd(np.stack([u * nx + v * ny, u * ox + v * oy])) * g.dealias
        coupling = cfg.alpha * (phi_hat - n_hat)
        dn = -br_n - cfg.kappa * g.ddy(phi_hat) + coupling
        dom = -br_o + coupling
        return np.stack([dn, dom])

    def step(self, dt: float) -> None:
        speed = self.max_speed()
        if speed * dt / self.grid.dx > 1.0:
            raise CflError(f"CFL violated: max|u|={speed:.3g}, dt={dt:.3g}; "
                           f"suggested dt <= {0.5 * self.grid.dx / speed:.3g}")
        self.state = _if_rk4(self.state, self.lin, self._nonlinear, dt)
        self.state *= self.grid.dealias
        self.time += dt

    def fields(self) -> np.ndarray:
        return np.stack([self.density(), self.potential()])

    field_names = ("density", "potential")

    def energy(self) -> float:
        """0.5 <n^2 + |grad phi|^2>, the standard two-field energy."""
        g = self.grid
        ph = self.phi_hat()
        grad2 = g.spec_mean_sq(g.ddx(ph)) + g.spec_mean_sq(g.ddy(ph))
        return 0.5 * (g.spec_mean_sq(self.state[0]) + grad2)


def make_solver(cfg: SolverConfig):
    if cfg.system == KOLMOGOROV:
        solver = KolmogorovSolver(cfg)
        w0 = cfg.ic_amplitude * gaussian_random_field(cfg.grid, cfg.seed,
                                                      cfg.ic_gamma, cfg.ic_tau)
        solver.set_vorticity(w0)
    else:
        solver = HasegawaWakataniSolver(cfg)
        n0 = cfg.ic_amplitude * gaussian_random_field(cfg.grid, cfg.seed,
                                                      cfg.ic_gamma, cfg.ic_tau)
        phi0 = cfg.ic_amplitude * gaussian_random_field(cfg.grid, cfg.seed + 90001,
                                                        cfg.ic_gamma, cfg.ic_tau)
        solver.set_fields(n0, phi0)
    return solver


def generate(cfg: SolverConfig):
    """Run warm-up, then emit `frames` snapshots every output step.

    The internal step is half the CFL limit estimated from the initial
    condition (with a per-system velocity floor so the estimate survives the
    transition to turbulence), rounded so an output step is a whole number of
    internal steps.  Deterministic per seed.
    """
    from .trajectory import Trajectory

    cfg.validate()
    solver = make_solver(cfg)
    if cfg.dt is not None:
        dt_req = cfg.dt
    else:
        u_ref = max(solver.max_speed(), cfg.velocity_floor)
        dt_req = 0.5 * solver.grid.dx / u_ref
    stride = max(1, ceil(cfg.output_dt / dt_req))
    dt = cfg.output_dt / stride

    frames = np.empty((cfg.frames, len(solver.field_names), cfg.grid, cfg.grid),
                      np.float32)
    emitted = 0
    for _ in range(cfg.warmup_frames * stride):
        solver.step(dt)
    for fi in range(cfg.frames):
        snap = solver.fields()
        if not np.all(np.isfinite(snap)):
            raise SolverBlowUp(fi - 1)
        frames[fi] = snap
        emitted = fi + 1
        if fi + 1 < cfg.frames:
            for _ in range(stride):
                solver.step(dt)

    traj = Trajectory(frames, cfg.output_dt, list(solver.field_names),
                      periodic=(True, True))
    traj.meta.update(system=cfg.system, grid=cfg.grid, dt_internal=dt,
                     stride=stride, seed=cfg.seed, domain=cfg.domain)
    return traj.with_stats()
