"""Norm-conserving Schrödinger time stepping.

1D uses Crank-Nicolson, 2D an ADI scheme (Peaceman-Rachford for separable
potentials, a symmetric product of line Cayley steps otherwise). Both
reduce to Cayley-form tridiagonal solves along grid lines with Dirichlet walls
(psi = 0 on the outer boundary). All lines of one sweep are stacked into a
single block-tridiagonal system that is LU-factorised once per stepper.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

import numpy as np
from scipy.linalg import lapack

from .fields import Grid, PhysicsConstants, ScalarField, WaveFunction, integrate

if TYPE_CHECKING:
    from .scenario import Scenario

log = logging.getLogger(__name__)

CFL_PHASE_LIMIT = 0.5
BOUNDARY_DENSITY_LIMIT = 1e-8


@dataclass(frozen=True)
class SlitGeometry:
    """Hard-wall screen at ``x = barrier_x`` with openings centred on ``slit_centers`` (y)."""

    barrier_x: float
    barrier_thickness: float
    slit_centers: tuple[float, ...]
    slit_width: float
    barrier_height: float

    def __post_init__(self):
        centers = tuple(float(c) for c in self.slit_centers)
        object.__setattr__(self, "slit_centers", centers)
        if not 1 <= len(centers) <= 2:
            raise ValueError("one or two slits are supported")
        if self.slit_width <= 0 or self.barrier_thickness <= 0:
            raise ValueError("slit width and barrier thickness must be positive")
        if self.barrier_height < 0:
            raise ValueError("barrier height must be non-negative")
        if len(centers) == 2 and abs(centers[1] - centers[0]) <= self.slit_width:
            raise ValueError("slits overlap")

    @property
    def separation(self) -> float:
        if len(self.slit_centers) < 2:
            return 0.0
        return abs(self.slit_centers[1] - self.slit_centers[0])

    def only(self, which: int) -> "SlitGeometry":
        """Same screen with only slit ``which`` (0 = A, 1 = B) open."""
        return SlitGeometry(self.barrier_x, self.barrier_thickness, (self.slit_centers[which],),
                            self.slit_width, self.barrier_height)

    def validate(self, grid: Grid) -> None:
        if grid.dim != 2:
            raise ValueError("slits require 2D grid")
        dx, dy = grid.spacing
        if self.slit_width <= 2 * dy:
            raise ValueError(f"slit width {self.slit_width} must exceed 2*dy = {2 * dy}")
        if not grid.lo[0] < self.barrier_x < grid.hi[0]:
            raise ValueError("barrier lies outside the grid")
        for c in self.slit_centers:
            if not grid.lo[1] < c < grid.hi[1]:
                raise ValueError("slit centre lies outside the grid")

    def wall_mask(self, grid: Grid) -> np.ndarray:
        self.validate(grid)
        x, y = grid.mesh()
        wall = np.abs(x - self.barrier_x) <= 0.5 * self.barrier_thickness
        for c in self.slit_centers:
            wall &= ~(np.abs(y - c) < 0.5 * self.slit_width)
        return wall


@dataclass(frozen=True)
class Potential:
    """External potential V, evaluated lazily on a grid."""

    kind: str = "free"
    omega: float = 0.0
    center: tuple[float, ...] = (0.0, 0.0)
    slits: SlitGeometry | None = None
    values: ScalarField | None = None

    def __post_init__(self):
        if self.kind not in ("free", "harmonic", "barrier_mask", "custom"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "harmonic" and not self.omega > 0:
            raise ValueError("harmonic potential needs omega > 0")
        if self.kind == "barrier_mask" and self.slits is None:
            raise ValueError("barrier_mask potential needs a slit geometry")
        if self.kind == "custom" and self.values is None:
            raise ValueError("custom potential needs values")

    @classmethod
    def free(cls) -> "Potential":
        return cls("free")

    @classmethod
    def harmonic(cls, omega: float, center=(0.0, 0.0)) -> "Potential":
        return cls("harmonic", omega=omega, center=tuple(center))

    @classmethod
    def barrier(cls, slits: SlitGeometry) -> "Potential":
        return cls("barrier_mask", slits=slits)

    @classmethod
    def custom(cls, values: ScalarField) -> "Potential":
        return cls("custom", values=values)

    def axis_parts(self, grid: Grid, consts: PhysicsConstants) -> list[np.ndarray] | None:
        """Per-axis 1D terms when V(x, y) = Vx(x) + Vy(y); ``None`` otherwise."""
        if self.kind == "free":
            return [np.zeros(n) for n in grid.n]
        if self.kind == "harmonic":
            k = 0.5 * consts.mass * self.omega ** 2
            return [k * (ax - self.center[i]) ** 2 for i, ax in enumerate(grid.axes)]
        return None

    def evaluate(self, grid: Grid, consts: PhysicsConstants | None = None) -> ScalarField:
        consts = consts or PhysicsConstants()
        if self.kind == "custom":
            if self.values.grid != grid:
                raise ValueError("custom potential is defined on a different grid")
            return self.values
        if self.kind == "barrier_mask":
            V = np.where(self.slits.wall_mask(grid), self.slits.barrier_height, 0.0)
            return ScalarField(grid, V)
        parts = self.axis_parts(grid, consts)
        V = parts[0] if grid.dim == 1 else parts[0][:, None] + parts[1][None, :]
        return ScalarField(grid, V)


def _as_potential_values(V, grid: Grid, consts: PhysicsConstants) -> np.ndarray:
    if isinstance(V, Potential):
        return np.asarray(V.evaluate(grid, consts).values)
    if isinstance(V, ScalarField):
        return np.asarray(V.values)
    if V is None:
        return np.zeros(grid.shape)
    return np.broadcast_to(np.asarray(V, dtype=float), grid.shape)


def lattice_currents(values: np.ndarray, grid: Grid, consts: PhysicsConstants) -> list[np.ndarray]:
    """Face currents ``(hbar/m) Im(conj(psi_i) psi_(i+1)) / h`` along each axis.

    Entry ``i`` of axis ``a`` sits on the face between grid points ``i`` and
    ``i+1``. These are the exact fluxes of the three-point Hamiltonian:
    ``dP_i/dt = -(J_(i+1/2) - J_(i-1/2)) / h`` summed over axes.
    """
    vals = np.asarray(values)
    scale = consts.hbar / consts.mass
    out = []
    for ax, h in enumerate(grid.spacing):
        v = np.moveaxis(vals, ax, 0)
        link = (np.conj(v[:-1]) * v[1:]).imag * (scale / h)
        out.append(np.moveaxis(link, 0, ax))
    return out


class _CayleyLines:
    """Solve ``(I + i*beta*H) x = b`` on stacked grid lines.

    ``H = -(hbar^2/2m) d^2/ds^2 + W`` along each line, Dirichlet at both line
    ends; ``W`` has shape ``(n_lines, n_interior)``.
    """

    def __init__(self, W: np.ndarray, h: float, beta: float, consts: PhysicsConstants):
        n_lines, n = W.shape
        a = consts.hbar ** 2 / (2.0 * consts.mass * h * h)
        self.a = a
        self.beta = beta
        self.W = W
        self.shape = (n_lines, n)
        d = (1.0 + 1j * beta * (2.0 * a + W)).ravel()
        off = np.full(n_lines * n - 1, -1j * beta * a, dtype=complex)
        off[n - 1::n] = 0.0  # no coupling across line breaks
        self._explicit_diag = 1.0 - 1j * beta * (2.0 * a + W)
        self._explicit_off = 1j * beta * a
        dl, dd, du, du2, ipiv, info = lapack.zgttrf(off, d, off.copy())
        if info != 0:
            raise FloatingPointError(f"tridiagonal factorisation failed (info={info})")
        self._lu = (dl, dd, du, du2, ipiv)

    def apply_H(self, x: np.ndarray) -> np.ndarray:
        """H x on interior points with zero Dirichlet padding."""
        out = (2.0 * self.a + self.W) * x
        out[:, 1:] -= self.a * x[:, :-1]
        out[:, :-1] -= self.a * x[:, 1:]
        return out

    def explicit(self, x: np.ndarray) -> np.ndarray:
        """(I - i*beta*H) x, the right-hand side of the Cayley step."""
        out = self._explicit_diag * x
        c = self._explicit_off
        out[:, 1:] += c * x[:, :-1]
        out[:, :-1] += c * x[:, 1:]
        return out

    def solve(self, b: np.ndarray) -> np.ndarray:
        x, info = lapack.zgttrs(*self._lu, b.reshape(-1, 1))
        if info != 0:
            raise FloatingPointError(f"tridiagonal solve failed (info={info})")
        return x.reshape(self.shape)


class CrankNicolson1D:
    """Reusable CN stepper: ``(I + i dt H / 2hbar) psi' = (I - i dt H / 2hbar) psi``."""

    def __init__(self, grid: Grid, V, dt: float, consts: PhysicsConstants | None = None):
        if grid.dim != 1:
            raise ValueError("Crank-Nicolson stepper needs a 1D grid")
        if dt == 0:
            raise ValueError("dt must be non-zero")
        self.grid, self.dt = grid, dt
        self.consts = consts or PhysicsConstants()
        V = _as_potential_values(V, grid, self.consts)
        self._lines = _CayleyLines(np.asarray(V[1:-1], dtype=float)[None, :], grid.spacing[0],
                                   dt / (2.0 * self.consts.hbar), self.consts)

    def step_values(self, values: np.ndarray) -> np.ndarray:
        lines = self._lines
        inner = np.asarray(values[1:-1], dtype=complex)[None, :]
        rhs = lines.explicit(inner)
        out = np.zeros(values.shape, dtype=complex)
        out[1:-1] = lines.solve(rhs)[0]
        return out

    def step_flux(self, values: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """One step plus the link currents of the step mean, which carry it
        exactly through the discrete continuity equation."""
        new = self.step_values(values)
        return new, lattice_currents(0.5 * (np.asarray(values) + new), self.grid, self.consts)

    def step(self, psi: WaveFunction) -> WaveFunction:
        return WaveFunction(psi.grid, self.step_values(psi.values), psi.consts)


class PeacemanRachford2D:
    """Reusable 2D ADI stepper built from tridiagonal Cayley line solves.

    With ``H = Hx + Hy`` and ``b = dt / 2 hbar``, a separable potential is
    split axis by axis and the Peaceman-Rachford half steps::

        (I + i b Hx) psi* = (I - i b Hy) psi
        (I + i b Hy) psi' = (I - i b Hx) psi*

    are exactly unitary because ``Hx`` and ``Hy`` commute. Otherwise V/2
    goes into each direction; the two half-step operators then no longer
    commute and the product above loses unitarity, so the step becomes the
    symmetric product ``C_x(dt/2) C_y(dt) C_x(dt/2)`` of line Cayley
    transforms ``C(t) = (I + i t H / 2hbar)^-1 (I - i t H / 2hbar)``: still
    unitary, time-symmetric and second order.
    """

    def __init__(self, grid: Grid, V, dt: float, consts: PhysicsConstants | None = None):
        if grid.dim != 2:
            raise ValueError("ADI stepper needs a 2D grid")
        if dt == 0:
            raise ValueError("dt must be non-zero")
        self.grid, self.dt = grid, dt
        self.consts = consts or PhysicsConstants()
        parts = V.axis_parts(grid, self.consts) if isinstance(V, Potential) else None
        self.separable = parts is not None
        if self.separable:
            nx, ny = grid.n
            Wx = np.broadcast_to(parts[0][1:-1, None], (nx - 2, ny - 2))
            Wy = np.broadcast_to(parts[1][None, 1:-1], (nx - 2, ny - 2))
        else:
            half = 0.5 * _as_potential_values(V, grid, self.consts)[1:-1, 1:-1]
            Wx = Wy = half
        beta = dt / (2.0 * self.consts.hbar)
        hx, hy = grid.spacing
        # x-lines: rows of the transposed interior block
        beta_x = beta if self.separable else 0.5 * beta
        self._x = _CayleyLines(np.ascontiguousarray(Wx.T), hx, beta_x, self.consts)
        self._y = _CayleyLines(np.ascontiguousarray(Wy), hy, beta, self.consts)

    def _cayley_x(self, inner: np.ndarray) -> np.ndarray:
        t = np.ascontiguousarray(inner.T)
        return self._x.solve(self._x.explicit(t)).T

    def _cayley_y(self, inner: np.ndarray) -> np.ndarray:
        return self._y.solve(self._y.explicit(inner))

    def _stages(self, inner: np.ndarray) -> list[tuple[int, float, np.ndarray, np.ndarray]]:
        """``(axis, weight, before, after)`` for each one-axis Cayley stage."""
        a = self._cayley_x(inner)
        b = self._cayley_y(a)
        return [(0, 0.5, inner, a), (1, 1.0, a, b), (0, 0.5, b, self._cayley_x(b))]

    def step_values(self, values: np.ndarray) -> np.ndarray:
        inner = np.asarray(values[1:-1, 1:-1], dtype=complex)
        if self.separable:
            X, Y = self._x, self._y
            rhs = Y.explicit(inner)
            half = X.solve(np.ascontiguousarray(rhs.T))  # shape (ny-2, nx-2)
            rhs2 = X.explicit(half)
            new = Y.solve(np.ascontiguousarray(rhs2.T))
        else:
            new = self._stages(inner)[-1][3]
        out = np.zeros(values.shape, dtype=complex)
        out[1:-1, 1:-1] = new
        return out

    def step_flux(self, values: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """One step plus the step-averaged link currents that carry it.

        Each one-axis Cayley stage obeys the discrete continuity equation
        along its lines with the link currents of its stage mean, so the
        weighted stage currents satisfy ``(P' - P)/dt + div J = 0`` exactly.
        """
        inner = np.asarray(values[1:-1, 1:-1], dtype=complex)
        if self.separable:
            new = self.step_values(values)
            # commuting factors: the step equals C_y(dt) followed by C_x(dt)
            mid = self._cayley_y(inner)
            stages = [(1, 1.0, inner, mid), (0, 1.0, mid, new[1:-1, 1:-1])]
        else:
            stages = self._stages(inner)
            new = np.zeros(values.shape, dtype=complex)
            new[1:-1, 1:-1] = stages[-1][3]
        faces = [np.zeros((self.grid.n[0] - 1, self.grid.n[1])),
                 np.zeros((self.grid.n[0], self.grid.n[1] - 1))]
        mean = np.zeros(values.shape, dtype=complex)
        for axis, weight, before, after in stages:
            mean[1:-1, 1:-1] = 0.5 * (before + after)
            faces[axis] += weight * lattice_currents(mean, self.grid, self.consts)[axis]
        return new, faces

    def step(self, psi: WaveFunction) -> WaveFunction:
        return WaveFunction(psi.grid, self.step_values(psi.values), psi.consts)


def make_stepper(grid: Grid, V, dt: float, consts: PhysicsConstants | None = None):
    cls = CrankNicolson1D if grid.dim == 1 else PeacemanRachford2D
    return cls(grid, V, dt, consts)


def step_cn_1d(psi: WaveFunction, V, dt: float) -> WaveFunction:
    """One Crank-Nicolson step of ``i hbar dpsi/dt = (-hbar^2/2m lap + V) psi``."""
    return CrankNicolson1D(psi.grid, V, dt, psi.consts).step(psi)


def step_adi_2d(psi: WaveFunction, V, dt: float) -> WaveFunction:
    """One Peaceman-Rachford step in two dimensions."""
    return PeacemanRachford2D(psi.grid, V, dt, psi.consts).step(psi)


def apply_hamiltonian(psi: WaveFunction, V) -> np.ndarray:
    """Discrete H psi (same stencil as the steppers), zero on the boundary."""
    grid, consts = psi.grid, psi.consts
    Vv = _as_potential_values(V, grid, consts)
    vals = np.asarray(psi.values)
    out = np.zeros(vals.shape, dtype=complex)
    inner = tuple(slice(1, -1) for _ in range(grid.dim))
    acc = Vv[inner] * vals[inner]
    for ax, h in enumerate(grid.spacing):
        a = consts.hbar ** 2 / (2.0 * consts.mass * h * h)
        lo = [slice(1, -1)] * grid.dim
        hi = [slice(1, -1)] * grid.dim
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        acc = acc - a * (vals[tuple(lo)] - 2.0 * vals[inner] + vals[tuple(hi)])
    out[inner] = acc
    return out


def energy(psi: WaveFunction, V) -> float:
    """<psi|H|psi> / <psi|psi> with the discrete Hamiltonian."""
    Hpsi = apply_hamiltonian(psi, V)
    num = np.vdot(psi.values, Hpsi).real
    return float(num / np.vdot(psi.values, psi.values).real)


@dataclass
class EvolutionResult:
    snapshots: list[tuple[float, WaveFunction]] = field(default_factory=list)
    norm_history: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    final: WaveFunction | None = None
    previous: WaveFunction | None = None

    @property
    def times(self) -> list[float]:
        return [t for t, _ in self.snapshots]

    @property
    def norm_drift(self) -> float:
        if not self.norm_history:
            return 0.0
        n0 = self.norm_history[0]
        return float(max(abs(n - n0) for n in self.norm_history) / n0)


def phase_cfl_warnings(grid: Grid, V: np.ndarray, dt: float, consts: PhysicsConstants) -> list[str]:
    vmax = float(np.max(np.abs(V)))
    ratio = abs(dt) * vmax / consts.hbar
    if ratio > CFL_PHASE_LIMIT:
        return [f"dt*max|V|/hbar = {ratio:.4g} exceeds {CFL_PHASE_LIMIT}; "
                "potential phase per step is under-resolved"]
    return []


def boundary_density_ratio(psi: WaveFunction, width: int = 3) -> float:
    P = psi.density
    edge = np.zeros(P.shape, dtype=bool)
    for ax in range(P.ndim):
        idx = [slice(None)] * P.ndim
        idx[ax] = slice(0, width)
        edge[tuple(idx)] = True
        idx[ax] = slice(-width, None)
        edge[tuple(idx)] = True
    peak = P.max()
    return float(P[edge].max() / peak) if peak > 0 else 0.0


SnapshotHook = Callable[[int, float, WaveFunction], None]
StepHook = Callable[[float, WaveFunction, WaveFunction, list], None]


def evolve(scenario: "Scenario", on_snapshot: SnapshotHook | None = None,
           keep_snapshots: bool = True, on_step: StepHook | None = None) -> EvolutionResult:
    """Drive the stepper over the scenario schedule.

    Snapshots are taken at step 0 and every ``snapshot_stride`` steps (plus
    the final step). ``on_snapshot(index, t, psi)`` is called for each one;
    with ``keep_snapshots=False`` only the hook sees them. ``on_step(t,
    before, after, currents)`` sees every step, ``t`` being the start of the
    step and ``currents`` the per-axis link currents that carry it (see
    ``step_flux``); it runs before the snapshot hook of the same step.
    """
    grid, consts = scenario.grid, scenario.consts
    psi = scenario.initial_wavefunction()
    potential = scenario.potential()
    V = _as_potential_values(potential, grid, consts)
    dt = scenario.time.dt
    n_steps, stride = scenario.time.n_steps, scenario.time.snapshot_stride

    result = EvolutionResult()
    result.warnings.extend(phase_cfl_warnings(grid, V, dt, consts))
    stepper = make_stepper(grid, potential, dt, consts)

    worst_edge = boundary_density_ratio(psi)
    result.norm_history.append(psi.norm())

    def snap(index: int, t: float, state: WaveFunction):
        if keep_snapshots:
            result.snapshots.append((t, state))
        if on_snapshot is not None:
            on_snapshot(index, t, state)

    snap(0, 0.0, psi)
    index = 0
    prev = psi
    values = np.asarray(psi.values)
    for n in range(1, n_steps + 1):
        prev_values = values
        if on_step is not None:
            values, currents = stepper.step_flux(values)
        else:
            values = stepper.step_values(values)
        cur = WaveFunction(grid, values, consts)
        result.norm_history.append(cur.norm())
        if on_step is not None:
            on_step((n - 1) * dt, WaveFunction(grid, prev_values, consts), cur, currents)
        if n % stride == 0 or n == n_steps:
            index += 1
            snap(index, n * dt, cur)
            worst_edge = max(worst_edge, boundary_density_ratio(cur))
        if n == n_steps:
            prev = WaveFunction(grid, prev_values, consts)
            psi = cur
    result.final = psi
    result.previous = prev if n_steps > 0 else None
    if worst_edge > BOUNDARY_DENSITY_LIMIT:
        result.warnings.append(f"boundary density reached {worst_edge:.3g} of the peak "
                               f"(limit {BOUNDARY_DENSITY_LIMIT:g})")
    return result
