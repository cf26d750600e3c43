"""1D Klein-Gordon evolution with leapfrog stepping.

``(1/c^2) d2Psi/dt2 - d2Psi/dx2 + (m c / hbar)^2 Psi = 0`` on a line with
Dirichlet walls (or a periodic ring). Metric signature (+, -) with
``d^mu = ((1/c) d/dt, -d/dx)``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import fft

from .diagnostics import (
    DiagnosticReport,
    evaluation_mask,
    make_report,
    variable_mass_field,
)
from .fields import (
    Grid,
    PhysicsConstants,
    TWO_PI,
    WaveFunction,
    decompose,
    phase_gradient,
    wrap_phase,
)

CFL_MAX = 0.9


def _mu2(consts: PhysicsConstants) -> float:
    return (consts.mass * consts.c / consts.hbar) ** 2


def _lap(values: np.ndarray, h: float, periodic: bool) -> np.ndarray:
    if periodic:
        return (np.roll(values, -1) - 2.0 * values + np.roll(values, 1)) / (h * h)
    out = np.zeros_like(values)
    out[1:-1] = (values[2:] - 2.0 * values[1:-1] + values[:-2]) / (h * h)
    return out


@dataclass(frozen=True, eq=False)
class KGState:
    """Two consecutive time levels ``psi_prev`` (t - dt) and ``psi`` (t).

    Dirichlet walls pin the end points to zero; ``periodic`` wraps instead.
    """

    grid: Grid
    psi_prev: np.ndarray
    psi: np.ndarray
    dt: float
    consts: PhysicsConstants = PhysicsConstants()
    t: float = 0.0
    periodic: bool = False

    def __post_init__(self):
        if self.grid.dim != 1:
            raise ValueError("Klein-Gordon solver is 1D only")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        h = self.grid.spacing[0]
        cfl = self.consts.c * self.dt / h
        if cfl > CFL_MAX:
            raise ValueError(f"CFL violation: c*dt/dx = {cfl:.4g} > {CFL_MAX}")
        # the mass term tightens the leapfrog stability bound
        if (self.consts.c * self.dt) ** 2 * (4.0 / h ** 2 + _mu2(self.consts)) > 4.0:
            raise ValueError("CFL violation: mass term makes leapfrog unstable")
        for name in ("psi_prev", "psi"):
            v = np.array(getattr(self, name), dtype=complex)
            if v.shape != self.grid.shape:
                raise ValueError(f"{name} shape does not match grid")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def cfl(self) -> float:
        return self.consts.c * self.dt / self.grid.spacing[0]

    def wavefunction(self) -> WaveFunction:
        return WaveFunction(self.grid, self.psi, self.consts)


def step_kg(state: KGState) -> KGState:
    """One leapfrog step."""
    h = state.grid.spacing[0]
    c2dt2 = (state.consts.c * state.dt) ** 2
    psi = state.psi
    new = 2.0 * psi - state.psi_prev + c2dt2 * (_lap(psi, h, state.periodic)
                                               - _mu2(state.consts) * psi)
    if not state.periodic:
        new[0] = new[-1] = 0.0
    return replace(state, psi_prev=psi, psi=new, t=state.t + state.dt)


def evolve_kg(state: KGState, n_steps: int, record=None) -> KGState:
    """Advance ``n_steps``; ``record(state)`` is called after every step."""
    for _ in range(n_steps):
        state = step_kg(state)
        if record is not None:
            record(state)
    return state


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------

def discrete_omega(lam, dt: float, consts: PhysicsConstants) -> np.ndarray:
    """Leapfrog frequency for Laplacian eigenvalue ``-lam``."""
    arg = 1.0 - 0.5 * (consts.c * dt) ** 2 * (np.asarray(lam) + _mu2(consts))
    return np.arccos(np.clip(arg, -1.0, 1.0)) / dt


def continuum_omega(k, consts: PhysicsConstants) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    return consts.c * np.sqrt(k * k + _mu2(consts))


def positive_frequency(grid: Grid, values, dt: float, consts: PhysicsConstants | None = None,
                       periodic: bool = False, t0: float = 0.0) -> KGState:
    """State whose discrete modes all evolve as ``exp(-i omega t)``, omega > 0.

    ``values`` is Psi at ``t0``; the earlier level is built mode by mode in
    the eigenbasis of the discrete Laplacian (sine modes for Dirichlet walls,
    Fourier modes for a ring), so every mode is an exact leapfrog solution.
    """
    consts = consts or PhysicsConstants()
    f = np.asarray(values, dtype=complex)
    n = grid.n[0]
    h = grid.spacing[0]
    if periodic:
        k = TWO_PI * fft.fftfreq(n, d=h)
        lam = (2.0 / h ** 2) * (1.0 - np.cos(k * h))
        w = discrete_omega(lam, dt, consts)
        prev = fft.ifft(fft.fft(f) * np.exp(1j * w * dt))
    else:
        inner = f[1:-1]
        m = inner.size
        j = np.arange(1, m + 1)
        lam = (2.0 / h ** 2) * (1.0 - np.cos(np.pi * j / (m + 1)))
        w = discrete_omega(lam, dt, consts)
        phase = np.exp(1j * w * dt)

        def back(part):
            return fft.idst(fft.dst(part, type=1) * phase, type=1)

        prev = np.zeros_like(f)
        prev[1:-1] = back(inner.real) + 1j * back(inner.imag)
        f = f.copy()
        f[0] = f[-1] = 0.0
    return KGState(grid, prev, f, dt, consts, t0, periodic)


def plane_wave(grid: Grid, k: float, dt: float, consts: PhysicsConstants | None = None) -> KGState:
    """Travelling mode ``exp(i(kx - omega t))`` on a ring.

    ``k`` is rounded to the nearest wave number that fits the ring of
    length ``n * dx``.
    """
    consts = consts or PhysicsConstants()
    n, h = grid.n[0], grid.spacing[0]
    x = grid.axes[0]
    k = TWO_PI * round(k * n * h / TWO_PI) / (n * h)
    return positive_frequency(grid, np.exp(1j * k * x), dt, consts, periodic=True)


def standing_mode(grid: Grid, k: float, dt: float,
                  consts: PhysicsConstants | None = None) -> KGState:
    """Dirichlet eigenmode ``sin(k (x - x_min)) exp(-i omega t)``.

    ``k`` is rounded to the nearest multiple of ``pi / (x_max - x_min)``.
    """
    consts = consts or PhysicsConstants()
    length = grid.hi[0] - grid.lo[0]
    j = max(1, round(k * length / np.pi))
    kk = np.pi * j / length
    return positive_frequency(grid, np.sin(kk * (grid.axes[0] - grid.lo[0])), dt, consts)


def gaussian_packet(grid: Grid, x0: float, sigma: float, k0: float, dt: float,
                    consts: PhysicsConstants | None = None, periodic: bool = False) -> KGState:
    x = grid.axes[0]
    f = np.exp(-(x - x0) ** 2 / (4.0 * sigma ** 2) + 1j * k0 * x)
    return positive_frequency(grid, f, dt, consts, periodic)


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------

def measure_frequency(series, dt: float) -> float:
    """Angular frequency of a ``exp(-i omega t)`` time series by a phase fit."""
    phase = np.unwrap(np.angle(np.asarray(series, dtype=complex)))
    t = dt * np.arange(phase.size)
    slope = np.polyfit(t, phase, 1)[0]
    return float(-slope)


def discrete_energy(state: KGState) -> float:
    """Conserved leapfrog functional at t - dt/2.

    ``sum |psi - psi_prev|^2 / (c dt)^2 + Re <A psi, psi_prev>`` times dx,
    where ``A = -lap + (m c / hbar)^2``.
    """
    h = state.grid.spacing[0]
    a, b = state.psi, state.psi_prev
    kin = np.abs(a - b) ** 2 / (state.consts.c * state.dt) ** 2
    Ab = -_lap(b, h, state.periodic) + _mu2(state.consts) * b
    pot = (a * np.conj(Ab)).real
    if not state.periodic:
        kin, pot = kin[1:-1], pot[1:-1]
    return float(h * np.sum(kin + pot))


def _levels(prev: KGState, mid: KGState, nxt: KGState):
    consts = mid.consts
    g = mid.grid
    return [decompose(WaveFunction(g, s.psi, consts)) for s in (prev, mid, nxt)]


def kg_current_residual(prev: KGState, mid: KGState, nxt: KGState, threshold: float = 1e-2,
                        floor: float = 1e-4) -> tuple[DiagnosticReport, DiagnosticReport]:
    """Conserved-current residual and the energy-momentum combination.

    ``r1 = (1/c^2) d/dt(P dS/dt) - d/dx(P dS/dx)`` at the middle level, with
    time derivatives centred on half steps. ``r2 = r1 / P`` is assembled
    independently as ``d_mu d^mu S + (d_mu P / P) d^mu S``; its last term is
    reported on its own as ``classical_flow_term``.
    """
    consts = mid.consts
    grid = mid.grid
    dt = mid.dt
    h = grid.spacing[0]
    c2 = consts.c ** 2
    s0, s1, s2 = _levels(prev, mid, nxt)
    period = TWO_PI * consts.hbar
    P0, P1, P2 = (np.asarray(s.P.values) for s in (s0, s1, s2))
    S0, S1, S2 = (np.asarray(s.S.values) for s in (s0, s1, s2))
    St_lo = wrap_phase(S1 - S0, period) / dt
    St_hi = wrap_phase(S2 - S1, period) / dt
    flux_t = (0.5 * (P1 + P2) * St_hi - 0.5 * (P0 + P1) * St_lo) / dt
    # spatial flux on faces with wrapped steps
    step = wrap_phase(np.diff(S1), period) / h
    face = 0.5 * (P1[1:] + P1[:-1]) * step
    div = np.zeros_like(P1)
    div[1:-1] = (face[1:] - face[:-1]) / h
    r1 = flux_t / c2 - div

    Stt = (St_hi - St_lo) / dt
    Sxx = np.zeros_like(P1)
    Sxx[1:-1] = (step[1:] - step[:-1]) / h
    Sx = phase_gradient(s1.S, consts.hbar).components[0]
    St = 0.5 * (St_lo + St_hi)
    safe = np.where(P1 > 0, P1, 1.0)
    Pt = (P2 - P0) / (2.0 * dt)
    Px = np.gradient(P1, h)
    # d^mu = (d_t / c, -d_x): d_mu P d^mu S = P_t S_t / c^2 - P_x S_x
    flow = (Pt * St / c2 - Px * Sx) / safe
    r2 = Stt / c2 - Sxx + flow
    keep = evaluation_mask((s0, s1, s2), floor)
    rep1 = make_report("kg_current", r1, keep, grid, threshold, dt)
    rep2 = make_report("kg_energy_momentum", r2, keep, grid, threshold, dt,
                       classical_flow_term=float(np.max(np.abs(np.where(keep, flow, 0.0)))))
    return rep1, rep2


def mass_consistency(prev: KGState, mid: KGState, nxt: KGState, floor: float = 1e-4):
    """Both sides of ``M^2 c^2 = d_mu S d^mu S`` at the middle level.

    Returns ``(m2c2_amplitude, m2c2_phase, keep)``: the left side from the
    amplitude box operator, the right side ``S_t^2 / c^2 - S_x^2`` from
    centred phase differences, and the evaluation mask.
    """
    consts = mid.consts
    dt = mid.dt
    s0, s1, s2 = _levels(prev, mid, nxt)
    m2c2 = variable_mass_field(s0.P, s1.P, s2.P, dt, consts)
    period = TWO_PI * consts.hbar
    St = wrap_phase(np.asarray(s2.S.values) - np.asarray(s0.S.values), period) / (2.0 * dt)
    Sx = phase_gradient(s1.S, consts.hbar).components[0]
    rhs = St ** 2 / consts.c ** 2 - Sx ** 2
    keep = evaluation_mask((s0, s1, s2), floor)
    return np.asarray(m2c2.values), rhs, keep


def four_momentum(prev: KGState, mid: KGState, nxt: KGState, floor: float = 1e-4):
    """P-weighted means of ``E = -dS/dt`` and ``p = dS/dx`` at the middle level."""
    consts = mid.consts
    s0, s1, s2 = _levels(prev, mid, nxt)
    St = wrap_phase(np.asarray(s2.S.values) - np.asarray(s0.S.values),
                    TWO_PI * consts.hbar) / (2.0 * mid.dt)
    Sx = phase_gradient(s1.S, consts.hbar).components[0]
    keep = evaluation_mask((s0, s1, s2), floor)
    w = np.where(keep, np.asarray(s1.P.values), 0.0)
    return float(np.sum(-St * w) / w.sum()), float(np.sum(Sx * w) / w.sum())


__all__ = [
    "CFL_MAX", "KGState", "step_kg", "evolve_kg", "discrete_omega", "continuum_omega",
    "positive_frequency", "plane_wave", "standing_mode", "gaussian_packet",
    "measure_frequency", "discrete_energy", "kg_current_residual", "mass_consistency",
    "four_momentum",
]
