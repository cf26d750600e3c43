"""Bohmian trajectories, ensemble sampling and dot-pattern accumulation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy import ndimage

from .fields import Grid, ScalarField, VectorField, WaveFunction
from .hydro import NODE_EPS
from .propagator import lattice_currents
from .rng import CounterRNG, as_rng

if TYPE_CHECKING:
    from .scenario import Scenario

ACTIVE, EXITED, NODE_STALLED = 0, 1, 2
STATUS_NAMES = {ACTIVE: "active", EXITED: "exited", NODE_STALLED: "node_stalled"}


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _invert_linear_cdf(x: np.ndarray, p: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse CDF of the piecewise-linear density through (x, p).

    ``u`` holds uniforms in [0, 1); returns one sample per entry.
    """
    h = np.diff(x)
    mass = 0.5 * (p[:-1] + p[1:]) * h
    cdf = np.concatenate(([0.0], np.cumsum(mass)))
    total = cdf[-1]
    if not total > 0:
        raise ValueError("degenerate density (all zero)")
    target = u * total
    cell = np.searchsorted(cdf, target, side="right") - 1
    cell = np.clip(cell, 0, len(mass) - 1)
    # skip empty cells that searchsorted can land on at their left edge
    while True:
        empty = mass[cell] <= 0
        if not empty.any():
            break
        cell = np.where(empty, cell + 1, cell)
        cell = np.clip(cell, 0, len(mass) - 1)
    m = np.clip(target - cdf[cell], 0.0, mass[cell])
    a, b, w = p[cell], p[cell + 1], h[cell]
    # solve a*s + (b - a) s^2 / (2w) = m, stable for a -> 0 and b -> a
    disc = np.maximum(a * a + 2.0 * (b - a) * m / w, 0.0)
    s = 2.0 * m / (a + np.sqrt(disc))
    return x[cell] + np.clip(s, 0.0, w)


def sample_initial_positions(P0: ScalarField, n: int, seed) -> np.ndarray:
    """Draw ``n`` positions (shape ``(n, dim)``) from the interpolant of P0.

    1D inverts the trapezoidal cumulative exactly; 2D samples x from the
    marginal, then y from the conditional at that x. Particle ``i`` only uses
    counter ``i`` of its stream, so the draw is order-independent.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    grid = P0.grid
    P = np.asarray(P0.values, dtype=float)
    if np.any(P < 0) or not P.max() > 0:
        raise ValueError("degenerate density (all zero)")
    u = as_rng(seed).split("initial-positions").per_item(n, grid.dim)
    if grid.dim == 1:
        return _invert_linear_cdf(grid.axes[0], P, u[:, 0])[:, None]

    xs, ys = grid.axes
    marginal = np.trapezoid(P, ys, axis=1)
    x = _invert_linear_cdf(xs, marginal, u[:, 0])
    hx = grid.spacing[0]
    i = np.clip(((x - xs[0]) / hx).astype(int), 0, len(xs) - 2)
    t = (x - xs[i]) / hx
    out = np.empty((n, 2))
    out[:, 0] = x
    out[:, 1] = _invert_blended_cdf(ys, P, i, t, u[:, 1])
    return out


def _invert_blended_cdf(y: np.ndarray, P: np.ndarray, row: np.ndarray, t: np.ndarray,
                        u: np.ndarray) -> np.ndarray:
    """Vectorised :func:`_invert_linear_cdf` for the lines
    ``(1 - t) P[row] + t P[row + 1]``, one line per sample."""
    h = np.diff(y)
    mass = 0.5 * (P[:, :-1] + P[:, 1:]) * h
    cum = np.concatenate([np.zeros((P.shape[0], 1)), np.cumsum(mass, axis=1)], axis=1)
    s = 1.0 - t

    def line(table, j):
        return s * table[row, j] + t * table[row + 1, j]

    ny = y.size
    target = u * line(cum, np.full(row.size, ny - 1))
    lo = np.zeros(row.size, dtype=np.intp)
    hi = np.full(row.size, ny - 1, dtype=np.intp)
    # largest j with cum_j <= target
    while np.any(hi - lo > 1):
        mid = (lo + hi) // 2
        right = line(cum, mid) <= target
        lo = np.where(right, mid, lo)
        hi = np.where(right, hi, mid)
    cell = lo
    while True:
        m_cell = line(mass, cell)
        empty = (m_cell <= 0) & (cell < ny - 2)
        if not empty.any():
            break
        cell = np.where(empty, cell + 1, cell)
    m_cell = line(mass, cell)
    m = np.clip(target - line(cum, cell), 0.0, m_cell)
    a, b, w = line(P, cell), line(P, cell + 1), h[cell]
    disc = np.maximum(a * a + 2.0 * (b - a) * m / w, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        step = np.where(m > 0, 2.0 * m / (a + np.sqrt(disc)), 0.0)
    return y[cell] + np.clip(step, 0.0, w)


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Screen:
    """Detector line ``x[axis] = position``; particles crossing it in the
    positive direction are registered and absorbed."""

    position: float
    axis: int = 0

    @property
    def transverse_axis(self) -> int:
        return 1 - self.axis


@dataclass
class TrajectoryEnsemble:
    seed: int
    initial: np.ndarray
    positions: np.ndarray
    status: np.ndarray
    detected: np.ndarray
    hits: np.ndarray
    hit_times: np.ndarray
    times: list[float] = field(default_factory=list)
    paths: np.ndarray | None = None

    @property
    def n_particles(self) -> int:
        return self.initial.shape[0]

    def count(self, status: int) -> int:
        return int(np.count_nonzero(self.status == status))

    def summary(self) -> dict:
        return {
            "n_particles": self.n_particles,
            "seed": self.seed,
            "active": self.count(ACTIVE),
            "exited": self.count(EXITED),
            "node_stalled": self.count(NODE_STALLED),
            "detected": int(self.detected.sum()),
        }


class VelocityGuide:
    """Guidance from a sampled velocity field.

    The current ``j = P v`` and the density ``P`` are interpolated separately
    (linear / bilinear) and divided; with no density given this is plain
    interpolation of ``v``, exact for uniform flows. Cells touching the node
    mask give NaN.
    """

    def __init__(self, v: VectorField, density: np.ndarray | None = None):
        self.grid = v.grid
        self.velocity = v
        self.density = np.ones(v.grid.shape) if density is None else np.asarray(density, float)
        self.mask = (np.zeros(v.grid.shape, bool) if v.mask is None else np.asarray(v.mask))
        self.currents = [self.density * c for c in v.components]

    @classmethod
    def _raw(cls, grid, density, currents, mask) -> "VelocityGuide":
        obj = cls.__new__(cls)
        obj.grid, obj.density, obj.currents, obj.mask = grid, density, currents, mask
        obj.velocity = None
        return obj

    def blend(self, other: "VelocityGuide", w: float) -> "VelocityGuide":
        if w == 0.0:
            return self
        if w == 1.0:
            return other
        dens = (1 - w) * self.density + w * other.density
        cur = [(1 - w) * x + w * y for x, y in zip(self.currents, other.currents)]
        return VelocityGuide._raw(self.grid, dens, cur, self.mask | other.mask)

    def __call__(self, pos: np.ndarray) -> np.ndarray:
        grid = self.grid
        coords = np.empty((grid.dim, pos.shape[0]))
        for ax in range(grid.dim):
            coords[ax] = (pos[:, ax] - grid.lo[ax]) / grid.spacing[ax]

        def interp(f):
            f = np.where(self.mask, np.nan, f)
            return ndimage.map_coordinates(f, coords, order=1, mode="nearest", prefilter=False)

        P = interp(self.density)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.stack([interp(c) / P for c in self.currents], axis=1)


def link_currents(psi: WaveFunction) -> list[np.ndarray]:
    """Lattice face currents of ``psi`` (see :func:`lattice_currents`)."""
    return lattice_currents(psi.values, psi.grid, psi.consts)


class FluxGuide:
    """Finite-volume guidance consistent with the discrete continuity equation.

    Density is taken constant over the cell around each grid point, and the
    normal current varies linearly across the cell between the two face
    (link) currents. The resulting velocity ``J / P_cell`` transports a
    cell-constant density exactly as the lattice wave does, so the ensemble
    stays equivariant with the discrete dynamics; normal velocity vanishes at
    hard walls. Cells with density below ``eps_node`` give NaN.
    """

    def __init__(self, psi: WaveFunction, eps_node: float | None = None):
        self.grid = psi.grid
        self.density = np.asarray(psi.density, dtype=float)
        if eps_node is None:
            eps_node = NODE_EPS * float(self.density.max())
        self.eps_node = eps_node
        self.faces = self._pad(link_currents(psi))

    def _pad(self, links: list[np.ndarray]) -> list[np.ndarray]:
        # zero flux through the outer walls; faces[a][k] is the face left of cell k
        padded = []
        for ax, link in enumerate(links):
            width = [(0, 0)] * self.grid.dim
            width[ax] = (1, 1)
            padded.append(np.pad(link, width))
        return padded

    @classmethod
    def from_step(cls, before: WaveFunction, after: WaveFunction, currents=None,
                  eps_node: float | None = None) -> "FluxGuide":
        """Guide for one time step, frozen over the step.

        ``currents`` are the per-axis link currents that carry the step (as
        returned by the stepper's ``step_flux``). Without them the link
        currents of the step average ``(psi_n + psi_(n+1)) / 2`` are used,
        which is exact for Crank-Nicolson. The density is the mean of the
        two levels.
        """
        if currents is None:
            mean = WaveFunction(before.grid, 0.5 * (np.asarray(before.values)
                                                    + np.asarray(after.values)), before.consts)
            currents = link_currents(mean)
        density = 0.5 * (np.asarray(before.density) + np.asarray(after.density))
        if eps_node is None:
            eps_node = NODE_EPS * float(density.max())
        obj = cls.__new__(cls)
        obj.grid, obj.density, obj.eps_node = before.grid, density, eps_node
        obj.faces = obj._pad(list(currents))
        return obj

    @classmethod
    def _raw(cls, grid, density, faces, eps_node) -> "FluxGuide":
        obj = cls.__new__(cls)
        obj.grid, obj.density, obj.faces, obj.eps_node = grid, density, faces, eps_node
        return obj

    def blend(self, other: "FluxGuide", w: float) -> "FluxGuide":
        if w == 0.0 or other is self:
            return self
        if w == 1.0:
            return other
        return FluxGuide._raw(self.grid, (1 - w) * self.density + w * other.density,
                              [(1 - w) * a + w * b for a, b in zip(self.faces, other.faces)],
                              (1 - w) * self.eps_node + w * other.eps_node)

    def cells(self, pos: np.ndarray):
        """Nearest-point cell index and in-cell coordinate in [0, 1] per axis."""
        grid = self.grid
        idx, frac = [], []
        for ax in range(grid.dim):
            f = (pos[:, ax] - grid.lo[ax]) / grid.spacing[ax]
            f = np.where(np.isfinite(f), f, 0.0)
            c = np.clip(np.floor(f + 0.5), 0, grid.n[ax] - 1).astype(np.intp)
            idx.append(c)
            frac.append(np.clip(f - c + 0.5, 0.0, 1.0))
        return tuple(idx), frac

    def _current(self, idx, frac, axis: int) -> np.ndarray:
        faces = self.faces[axis]
        flat = np.ravel_multi_index(idx, faces.shape)
        stride = faces.strides[axis] // faces.itemsize
        flat_faces = faces.ravel()
        left_j = flat_faces.take(flat)
        return left_j + frac[axis] * (flat_faces.take(flat + stride) - left_j)

    def normal_current(self, pos: np.ndarray, axis: int) -> np.ndarray:
        idx, frac = self.cells(pos)
        return self._current(idx, frac, axis)

    def transport(self, pos: np.ndarray, duration: float, screen: "Screen | None" = None,
                  max_crossings: int = 10_000):
        """Move particles for ``duration`` along this (frozen) field exactly.

        Within a cell each velocity component is linear in its own
        coordinate only, so every axis follows ``dxi/dt = a + b xi`` with a
        closed-form solution; particles are carried cell by cell. Returns
        ``(new_pos, stalled, hit, hit_pos, hit_dt)`` where ``hit`` marks
        particles that reached ``screen`` moving forward, after ``hit_dt``.
        """
        grid = self.grid
        dim = grid.dim
        n = pos.shape[0]
        out = np.array(pos, dtype=float)
        stalled = ~np.all(np.isfinite(out), axis=1)
        hit = np.zeros(n, dtype=bool)
        hit_pos = np.full((n, dim), np.nan)
        hit_dt = np.full(n, np.nan)
        idx, frac = self.cells(np.where(stalled[:, None], 0.0, out))
        idx = np.stack(idx, axis=1)
        xi = np.stack(frac, axis=1)
        left = np.full(n, float(duration))
        live = np.flatnonzero(~stalled)
        dens = self.density.ravel()
        h = np.asarray(grid.spacing)
        upper = np.asarray(grid.n) - 1
        for _ in range(max_crossings):
            if live.size == 0:
                break
            cid = tuple(idx[live, a] for a in range(dim))
            P = dens.take(np.ravel_multi_index(cid, self.density.shape))
            dead = P < self.eps_node
            if dead.any():
                stalled[live[dead]] = True
                live = live[~dead]
                cid = tuple(c[~dead] for c in cid)
                P = P[~dead]
                if live.size == 0:
                    break
            x0 = xi[live]
            u0 = np.empty_like(x0)
            beta = np.empty_like(x0)
            t_exit = np.full(live.size, np.inf)
            exit_axis = np.full(live.size, -1)
            for a in range(dim):
                faces = self.faces[a]
                flat = np.ravel_multi_index(cid, faces.shape)
                stride = faces.strides[a] // faces.itemsize
                jl = faces.ravel().take(flat)
                jr = faces.ravel().take(flat + stride)
                beta[:, a] = (jr - jl) / (P * h[a])
                u0[:, a] = jl / (P * h[a]) + beta[:, a] * x0[:, a]
                target = np.where(u0[:, a] > 0, 1.0, 0.0)
                t = _linear_flow_time(u0[:, a], beta[:, a], target - x0[:, a])
                better = t < t_exit
                t_exit = np.where(better, t, t_exit)
                exit_axis = np.where(better, a, exit_axis)
            t_hit = np.full(live.size, np.inf)
            if screen is not None:
                a = screen.axis
                xs = (screen.position - grid.lo[a]) / h[a] - idx[live, a] + 0.5
                inside = (xs >= x0[:, a]) & (xs <= 1.0) & (u0[:, a] > 0)
                t_hit = np.where(inside, _linear_flow_time(u0[:, a], beta[:, a], xs - x0[:, a]),
                                 np.inf)
            rem = left[live]
            step = np.minimum(np.minimum(t_exit, t_hit), rem)
            for a in range(dim):
                xi[live, a] = np.clip(x0[:, a] + _linear_flow_shift(u0[:, a], beta[:, a], step),
                                      0.0, 1.0)
            left[live] = rem - step
            hits = (t_hit <= t_exit) & (t_hit <= rem)
            if hits.any():
                k = live[hits]
                xi[k, screen.axis] = xs[hits]
                hit[k] = True
                hit_dt[k] = duration - left[k]
                hit_pos[k] = grid.lo + (idx[k] - 0.5 + xi[k]) * h
            crossing = ~hits & (t_exit <= rem) & np.isfinite(t_exit)
            if crossing.any():
                k = live[crossing]
                ax = exit_axis[crossing]
                up = u0[crossing, ax] > 0
                cur = idx[k, ax]
                can = np.where(up, cur < upper[ax], cur > 0)
                idx[k, ax] = np.where(can, cur + np.where(up, 1, -1), cur)
                xi[k, ax] = np.where(can, np.where(up, 0.0, 1.0), np.where(up, 1.0, 0.0))
            live = live[crossing]
        out = grid.lo + (idx - 0.5 + xi) * h
        out[stalled] = np.nan
        return out, stalled, hit, hit_pos, hit_dt

    def __call__(self, pos: np.ndarray) -> np.ndarray:
        idx, frac = self.cells(pos)
        P = self.density.ravel().take(np.ravel_multi_index(idx, self.density.shape))
        bad = (P < self.eps_node) | ~np.all(np.isfinite(pos), axis=1)
        P = np.where(bad, np.nan, P)
        out = np.empty(pos.shape)
        for ax in range(self.grid.dim):
            out[:, ax] = self._current(idx, frac, ax) / P
        return out


def _linear_flow_time(u0, beta, dist):
    """Time for ``dxi/dt = u0 + beta (xi - xi0)`` to cover ``dist`` (inf if never)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        x = beta * dist / u0
        t = np.where(np.abs(x) < 1e-9, dist / u0 * (1.0 - 0.5 * x), np.log1p(x) / beta)
        ok = (u0 != 0) & (dist * u0 >= 0) & (x > -1.0)
    return np.where(ok & np.isfinite(t), np.maximum(t, 0.0), np.inf)


def _linear_flow_shift(u0, beta, s):
    """Displacement after time ``s`` under ``dxi/dt = u0 + beta (xi - xi0)``."""
    bs = beta * s
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        full = u0 * np.expm1(bs) / beta
    return np.where(np.abs(bs) < 1e-9, u0 * s * (1.0 + 0.5 * bs), full)


def as_guide(item):
    """Coerce a VectorField / WaveFunction / guide into a guide object."""
    if isinstance(item, (VelocityGuide, FluxGuide)):
        return item
    if isinstance(item, WaveFunction):
        return FluxGuide(item)
    if isinstance(item, VectorField):
        return VelocityGuide(item)
    raise TypeError(f"cannot guide particles with {type(item).__name__}")


class GuidedEnsemble:
    """Streams an ensemble along ``v = grad S / m`` one velocity interval at a time.

    ``advance(g0, g1, h)`` moves the ensemble over ``[t, t+h]``. The ends
    may be velocity fields, wave functions or guide objects. Wave functions
    and flux guides are averaged and integrated exactly cell by cell;
    velocity guidance uses classical RK4, linear in time between the ends.
    """

    def __init__(self, grid: Grid, positions: np.ndarray, seed: int = 0,
                 screen: Screen | None = None, record_paths: bool = False, t0: float = 0.0):
        positions = np.array(positions, dtype=float).reshape(-1, grid.dim)
        self.grid = grid
        self.seed = seed
        self.screen = screen
        self.t = t0
        self.initial = positions.copy()
        self.pos = positions.copy()
        n = positions.shape[0]
        self.status = np.full(n, ACTIVE, dtype=np.int8)
        self.detected = np.zeros(n, dtype=bool)
        self.hits = np.full((n, grid.dim), np.nan)
        self.hit_times = np.full(n, np.nan)
        outside = ~grid.contains(self.pos)
        self.status[outside] = EXITED
        self.record = record_paths
        self.times = [t0]
        self._paths = [self.pos.copy()] if record_paths else None

    def advance(self, g0, g1, h: float) -> None:
        g0, g1 = as_guide(g0), as_guide(g1)
        live = np.flatnonzero(self.status == ACTIVE)
        if live.size and isinstance(g0, FluxGuide) and isinstance(g1, FluxGuide):
            self._transport(live, g0.blend(g1, 0.5), h)
        elif live.size:
            f0, fm, f1 = g0, g0.blend(g1, 0.5), g1
            x = self.pos[live]
            k1 = f0(x)
            k2 = fm(x + 0.5 * h * k1)
            k3 = fm(x + 0.5 * h * k2)
            k4 = f1(x + h * k3)
            new = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            stalled = ~np.all(np.isfinite(new), axis=1)
            self.status[live[stalled]] = NODE_STALLED
            ok = ~stalled
            live, x, new = live[ok], x[ok], new[ok]
            if self.screen is not None:
                a = self.screen.axis
                s = self.screen.position
                cross = (x[:, a] < s) & (new[:, a] >= s)
                if cross.any():
                    frac = (s - x[cross, a]) / (new[cross, a] - x[cross, a])
                    idx = live[cross]
                    self.hits[idx] = x[cross] + frac[:, None] * (new[cross] - x[cross])
                    self.hit_times[idx] = self.t + frac * h
                    self.detected[idx] = True
                    self.status[idx] = EXITED
            self.pos[live] = new
            out = ~self.grid.contains(new)
            self.status[live[out]] = EXITED
        self.t += h
        self.times.append(self.t)
        if self.record:
            self._paths.append(self.pos.copy())

    def _transport(self, live: np.ndarray, guide: "FluxGuide", h: float) -> None:
        new, stalled, hit, hit_pos, hit_dt = guide.transport(self.pos[live], h, self.screen)
        self.status[live[stalled]] = NODE_STALLED
        if hit.any():
            idx = live[hit]
            self.hits[idx] = hit_pos[hit]
            self.hit_times[idx] = self.t + hit_dt[hit]
            self.detected[idx] = True
            self.status[idx] = EXITED
            new[hit] = hit_pos[hit]
        moving = ~stalled
        self.pos[live[moving]] = new[moving]
        out = moving & ~hit & ~self.grid.contains(new)
        self.status[live[out]] = EXITED

    def result(self) -> TrajectoryEnsemble:
        paths = np.stack(self._paths) if self.record else None
        return TrajectoryEnsemble(
            seed=self.seed, initial=self.initial, positions=self.pos.copy(),
            status=self.status.copy(), detected=self.detected.copy(), hits=self.hits.copy(),
            hit_times=self.hit_times.copy(), times=list(self.times), paths=paths,
        )


def integrate_trajectory(snapshots: Sequence, times: Sequence[float], x0,
                         dt: float | None = None, screen: Screen | None = None,
                         seed: int = 0, record_paths: bool = True,
                         densities: Sequence[np.ndarray] | None = None) -> TrajectoryEnsemble:
    """Integrate one or many starting points through a guidance history.

    ``snapshots[k]`` (a velocity field or a wave function) holds at
    ``times[k]``. The RK4 step defaults to the snapshot spacing; a smaller
    ``dt`` subdivides each interval, the guidance staying linear in time
    between snapshots. ``densities`` turns velocity-field snapshots into
    current-over-density interpolation.
    """
    if len(snapshots) != len(times) or len(times) < 2:
        raise ValueError("need at least two snapshots with matching times")
    if np.any(np.diff(times) <= 0):
        raise ValueError("snapshot times must be strictly increasing")
    if densities is None:
        guides = [as_guide(v) for v in snapshots]
    else:
        guides = [VelocityGuide(v, P) for v, P in zip(snapshots, densities)]
    grid = guides[0].grid
    ens = GuidedEnsemble(grid, np.atleast_1d(np.asarray(x0, dtype=float)).reshape(-1, grid.dim),
                         seed=seed, screen=screen, record_paths=record_paths, t0=times[0])
    for k in range(len(times) - 1):
        span = times[k + 1] - times[k]
        sub = 1 if dt is None else max(1, int(round(span / dt)))
        h = span / sub
        for j in range(sub):
            ens.advance(guides[k].blend(guides[k + 1], j / sub),
                        guides[k].blend(guides[k + 1], (j + 1) / sub), h)
    return ens.result()


# ---------------------------------------------------------------------------
# dot patterns
# ---------------------------------------------------------------------------

@dataclass
class DotPattern:
    axis_name: str
    bin_edges: np.ndarray
    counts: np.ndarray
    n_total: int
    excluded: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.sum() != self.n_total - self.excluded:
            raise ValueError("counts do not add up to n_total - excluded")

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def __add__(self, other: "DotPattern") -> "DotPattern":
        if not np.array_equal(self.bin_edges, other.bin_edges):
            raise ValueError("patterns use different bins")
        return DotPattern(self.axis_name, self.bin_edges, self.counts + other.counts,
                          self.n_total + other.n_total, self.excluded + other.excluded)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# bin_center,count\n")
            for c, n in zip(self.bin_centers, self.counts):
                fh.write(f"{float(c):.17g},{int(n)}\n")
        return path

    def gray_row(self) -> np.ndarray:
        peak = int(self.counts.max()) if self.counts.size else 0
        if peak == 0:
            return np.zeros(self.counts.size, dtype=np.uint8)
        return ((self.counts * 255 + peak // 2) // peak).astype(np.uint8)

    def to_pgm(self, path: str | Path) -> Path:
        return write_pgm(path, self.gray_row()[None, :])


def write_pgm(path: str | Path, image: np.ndarray) -> Path:
    """Binary P5, maxval 255."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValueError("PGM image must be 2D")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_staged_pgm(path: str | Path, patterns: Sequence[DotPattern]) -> Path:
    """One row per accumulation stage, each row scaled to its own maximum."""
    return write_pgm(path, np.stack([p.gray_row() for p in patterns]))


def _edges(bins, lo: float, hi: float) -> np.ndarray:
    if np.ndim(bins) == 0:
        return np.linspace(lo, hi, int(bins) + 1)
    return np.asarray(bins, dtype=float)


def select_dots(ensemble: TrajectoryEnsemble, screen: Screen | None,
                limit: int | None = None,
                window: tuple[float, float] | None = None) -> tuple[np.ndarray, np.ndarray, int]:
    """Dots in emission order: ``(particle_index, coordinate, n_outside)``.

    With a screen the dots are the transverse hit coordinates of detected
    particles; without one they are the final positions (1D) of particles
    that are not node-stalled. ``window`` restricts the recorded span (dots
    outside it are counted in ``n_outside``); ``limit`` keeps the first
    ``limit`` recorded dots together with the outside dots preceding them.
    """
    if ensemble.n_particles == 0:
        raise ValueError("empty ensemble")
    if screen is not None:
        idx = np.flatnonzero(ensemble.detected)
        coords = ensemble.hits[idx, screen.transverse_axis]
    else:
        if ensemble.positions.shape[1] != 1:
            raise ValueError("2D dot patterns need a screen")
        idx = np.flatnonzero(ensemble.status != NODE_STALLED)
        coords = ensemble.positions[idx, 0]
    if window is None:
        if limit is not None:
            idx, coords = idx[:limit], coords[:limit]
        return idx, coords, 0
    inside = (coords >= window[0]) & (coords <= window[1])
    if limit is not None:
        k = np.flatnonzero(inside)
        stop = k[limit - 1] + 1 if 0 < limit <= k.size else (coords.size if limit else 0)
        idx, coords, inside = idx[:stop], coords[:stop], inside[:stop]
    return idx[inside], coords[inside], int((~inside).sum())


def accumulate_dots(ensemble: TrajectoryEnsemble, screen: Screen | None, bins,
                    limit: int | None = None, grid: Grid | None = None,
                    window: tuple[float, float] | None = None) -> DotPattern:
    """Histogram of the dots chosen by :func:`select_dots`.

    Scalar ``bins`` span ``window`` if given, else the grid axis, else the
    data range.
    """
    _, coords, n_out = select_dots(ensemble, screen, limit, window)
    ax = 0 if screen is None else screen.transverse_axis
    if np.ndim(bins) == 0:
        if window is not None:
            lo, hi = window
        elif grid is not None:
            lo, hi = grid.lo[ax], grid.hi[ax]
        elif coords.size:
            lo, hi = float(coords.min()), float(coords.max())
            if hi == lo:
                lo, hi = lo - 0.5, hi + 0.5
        else:
            lo, hi = 0.0, 1.0
        edges = _edges(bins, lo, hi)
    else:
        edges = _edges(bins, 0, 0)
    counts, _ = np.histogram(coords, bins=edges)
    n_total = int(coords.size) + n_out
    return DotPattern(f"axis{ax}", edges, counts, n_total, excluded=n_total - int(counts.sum()))


def dot_image(ensemble: TrajectoryEnsemble, screen: Screen, edges: np.ndarray,
              height: int = 128, limit: int | None = None,
              window: tuple[float, float] | None = None) -> np.ndarray:
    """Dot picture of the screen as an 8-bit image (zero = black).

    Columns are the transverse bins; the row is a display coordinate along
    the slit length, uniform per particle from the ensemble seed, since the
    slits are invariant along that direction. Gray is linear in the number
    of dots per pixel.
    """
    idx, coords, _ = select_dots(ensemble, screen, limit, window)
    edges = np.asarray(edges, dtype=float)
    col = np.searchsorted(edges, coords, side="right") - 1
    col = np.where(coords == edges[-1], edges.size - 2, col)
    ok = (col >= 0) & (col < edges.size - 1)
    u = as_rng(ensemble.seed).split("screen-height").uniform_at(idx.astype(np.uint64))
    row = np.minimum((u * height).astype(np.intp), height - 1)
    counts = np.zeros((height, edges.size - 1), dtype=np.int64)
    np.add.at(counts, (row[ok], col[ok]), 1)
    peak = int(counts.max())
    if peak == 0:
        return np.zeros(counts.shape, dtype=np.uint8)
    return ((counts * 255 + peak // 2) // peak).astype(np.uint8)


# ---------------------------------------------------------------------------
# full dot experiment (evolution + guidance + detection)
# ---------------------------------------------------------------------------

@dataclass
class ScreenFlux:
    """Time-integrated probability current through the screen line."""

    coords: np.ndarray
    fluence: np.ndarray

    def bin_probabilities(self, edges: np.ndarray) -> np.ndarray:
        """Fluence integrated over each bin, normalised.

        The fluence is constant across the cell around each grid line, as
        in the finite-volume guidance field.
        """
        c = np.asarray(self.coords, dtype=float)
        half = 0.5 * np.diff(c)
        bounds = np.concatenate(([c[0] - half[0]], c[:-1] + half, [c[-1] + half[-1]]))
        mass = np.maximum(self.fluence, 0.0) * np.diff(bounds)
        cum = np.concatenate(([0.0], np.cumsum(mass)))
        at_edges = np.interp(np.asarray(edges, dtype=float), bounds, cum)
        probs = np.diff(at_edges)
        return probs / probs.sum()


@dataclass
class DotExperiment:
    ensemble: TrajectoryEnsemble
    screen: Screen | None
    flux: ScreenFlux | None
    final: WaveFunction
    previous: WaveFunction | None
    norm_history: list[float]
    warnings: list[str]
    snapshot_times: list[float]
    initial: WaveFunction


def screen_current(psi, screen: Screen) -> np.ndarray:
    """Normal probability current through the screen on each transverse grid line.

    ``psi`` is a wave function or a :class:`FluxGuide`. Uses the same cell
    reconstruction as the guide, so the time-integrated current is the
    Born-rule arrival density that a FluxGuide ensemble reproduces.
    """
    guide = psi if isinstance(psi, FluxGuide) else FluxGuide(psi)
    grid = guide.grid
    t_axis = screen.transverse_axis
    pts = np.empty((grid.n[t_axis], grid.dim))
    pts[:, screen.axis] = screen.position
    pts[:, t_axis] = grid.axes[t_axis]
    return guide.normal_current(pts, screen.axis)


def run_dot_experiment(scenario: "Scenario", slits=None, n_particles: int | None = None,
                       seed: int | None = None, record_paths: bool = False,
                       snapshot_hook=None) -> DotExperiment:
    """Evolve psi and carry a sampled ensemble along with it.

    Every time step the ensemble is transported exactly through the
    finite-volume field of that step (:meth:`FluxGuide.from_step`), which
    carries the same probability flux as the lattice evolution. When the
    scenario defines a screen, the current of the same field through it is
    integrated in time alongside, giving the Born-rule arrival density.
    """
    from .propagator import evolve  # noqa: local to keep import graph flat

    if slits is not None:
        scenario = scenario.with_slits(slits)
    spec = scenario.trajectories
    n = n_particles if n_particles is not None else spec.n_particles
    seed = seed if seed is not None else spec.seed
    grid = scenario.grid
    dt = scenario.time.dt
    psi0 = scenario.initial_wavefunction()
    P0 = ScalarField(grid, psi0.density / psi0.norm())
    start = sample_initial_positions(P0, n, seed)
    screen = Screen(spec.screen_x) if (spec.screen_x is not None and grid.dim == 2) else None
    ens = GuidedEnsemble(grid, start, seed=seed, screen=screen, record_paths=record_paths)
    transverse = grid.axes[1] if screen is not None else None
    fluence = np.zeros(grid.n[1]) if screen is not None else None
    times: list[float] = []

    def step(t: float, before: WaveFunction, after: WaveFunction, currents):
        g = FluxGuide.from_step(before, after, currents)
        if screen is not None:
            fluence[:] += screen_current(g, screen) * dt
        ens.advance(g, g, dt)

    def hook(index: int, t: float, psi: WaveFunction):
        times.append(t)
        if snapshot_hook is not None:
            snapshot_hook(index, t, psi)

    result = evolve(scenario, on_snapshot=hook, keep_snapshots=False, on_step=step)
    flux = ScreenFlux(transverse, fluence) if screen is not None else None
    return DotExperiment(ens.result(), screen, flux, result.final, result.previous,
                         result.norm_history, result.warnings, times, psi0)


def classical_pattern(scenario: "Scenario", which: str = "both_incoherent", bins=None,
                      n_particles: int | None = None, seed: int | None = None) -> DotPattern:
    """Trivial-machine benchmark: single-slit runs added bin-wise.

    ``which`` is ``"A"``, ``"B"`` or ``"both_incoherent"`` (A + B). Each
    single-slit run is a full quantum evolution with the other slit closed.
    """
    slits = scenario.slits
    if slits is None or len(slits.slit_centers) != 2:
        raise ValueError("classical pattern needs a double-slit scenario")
    bins = bins if bins is not None else scenario.trajectories.bins
    picks = {"A": [0], "B": [1], "both_incoherent": [0, 1]}[which]
    total = None
    for k in picks:
        exp = run_dot_experiment(scenario, slits=slits.only(k), n_particles=n_particles,
                                 seed=seed)
        pat = accumulate_dots(exp.ensemble, exp.screen, bins, grid=scenario.grid,
                              window=scenario.trajectories.window(scenario.grid))
        total = pat if total is None else total + pat
    return total
