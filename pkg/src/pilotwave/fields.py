"""Uniform-grid fields, finite-difference calculus and the Madelung map.

All arrays use ``indexing="ij"``: axis 0 is x, axis 1 (2D only) is y.
Fields are immutable once built; every operation returns a new field.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Grid:
    """Uniform 1D or 2D grid; endpoints are grid points."""

    n: tuple[int, ...]
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.n) not in (1, 2) or not (len(self.n) == len(self.lo) == len(self.hi)):
            raise ValueError("grid must be 1D or 2D with matching per-axis specs")
        for n, lo, hi in zip(self.n, self.lo, self.hi):
            if int(n) != n or n < 8:
                raise ValueError(f"n_points must be an integer >= 8, got {n}")
            if not hi > lo:
                raise ValueError(f"x_max must exceed x_min, got [{lo}, {hi}]")
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))

    @classmethod
    def line(cls, n: int, x_min: float, x_max: float) -> "Grid":
        return cls((n,), (x_min,), (x_max,))

    @classmethod
    def plane(cls, nx: int, x_min: float, x_max: float,
              ny: int, y_min: float, y_max: float) -> "Grid":
        return cls((nx, ny), (x_min, y_min), (x_max, y_max))

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for n, lo, hi in zip(self.n, self.lo, self.hi))

    @property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(np.linspace(lo, hi, n) for n, lo, hi in zip(self.n, self.lo, self.hi))

    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points (shape ``(N, dim)``) lying inside the box."""
        points = np.atleast_2d(points)
        inside = np.ones(points.shape[0], dtype=bool)
        for ax in range(self.dim):
            inside &= (points[:, ax] >= self.lo[ax]) & (points[:, ax] <= self.hi[ax])
        return inside


@dataclass(frozen=True)
class PhysicsConstants:
    hbar: float = 1.0
    mass: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        for name in ("hbar", "mass", "c"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be strictly positive, got {value}")


def _frozen(values, dtype=None) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype).view()
    arr.flags.writeable = False
    return arr


def _frozen_mask(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    mask = _frozen(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match grid {shape}")
    return mask


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real samples on a grid. Masked points (if any) hold 0 and carry no meaning."""

    grid: Grid
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        values = _frozen(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("scalar field values must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", _frozen_mask(self.mask, self.grid.shape))

    def with_values(self, values, mask=None) -> "ScalarField":
        return ScalarField(self.grid, values, self.mask if mask is None else mask)


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: Grid
    components: tuple[np.ndarray, ...]
    mask: np.ndarray | None = None

    def __post_init__(self):
        comps = tuple(_frozen(c, dtype=float) for c in self.components)
        if len(comps) != self.grid.dim:
            raise ValueError(f"expected {self.grid.dim} components, got {len(comps)}")
        for c in comps:
            if c.shape != self.grid.shape:
                raise ValueError("component shape does not match grid")
            if not np.all(np.isfinite(c)):
                raise ValueError("vector field values must be finite")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "mask", _frozen_mask(self.mask, self.grid.shape))

    def magnitude(self) -> ScalarField:
        mag = np.sqrt(sum(c * c for c in self.components))
        return ScalarField(self.grid, mag, self.mask)

    def dot(self, other: "VectorField") -> ScalarField:
        return ScalarField(self.grid, sum(a * b for a, b in zip(self.components, other.components)),
                           _combine_masks(self.mask, other.mask))

    def scaled(self, factor: float) -> "VectorField":
        return VectorField(self.grid, tuple(factor * c for c in self.components), self.mask)


@dataclass(frozen=True, eq=False)
class WaveFunction:
    grid: Grid
    values: np.ndarray
    consts: PhysicsConstants = field(default_factory=PhysicsConstants)

    def __post_init__(self):
        values = _frozen(self.values, dtype=complex)
        if values.shape != self.grid.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("wave function values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def density(self) -> np.ndarray:
        return self.values.real ** 2 + self.values.imag ** 2

    def norm(self) -> float:
        """Trapezoidal integral of |psi|^2."""
        return integrate(self.grid, self.density)

    def normalized(self) -> "WaveFunction":
        norm = self.norm()
        if norm <= 0:
            raise ValueError("cannot normalize a zero wave function")
        return WaveFunction(self.grid, self.values / np.sqrt(norm), self.consts)


@dataclass(frozen=True, eq=False)
class MadelungState:
    """Density P and action S with the node mask where S is undefined."""

    P: ScalarField
    S: ScalarField
    node_mask: np.ndarray
    consts: PhysicsConstants = field(default_factory=PhysicsConstants)

    def __post_init__(self):
        if np.any(self.P.values < 0):
            raise ValueError("density must be non-negative")
        object.__setattr__(self, "node_mask", _frozen_mask(self.node_mask, self.P.grid.shape))

    @property
    def grid(self) -> Grid:
        return self.P.grid


def _combine_masks(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a | b


# ---------------------------------------------------------------------------
# quadrature and finite differences
# ---------------------------------------------------------------------------

def integrate(grid: Grid, values: np.ndarray) -> float:
    """Trapezoidal integral over the whole grid."""
    out = np.asarray(values, dtype=float)
    for ax in reversed(range(grid.dim)):
        out = np.trapezoid(out, dx=grid.spacing[ax], axis=ax)
    return float(out)


def _d1(values: np.ndarray, dx: float, axis: int) -> np.ndarray:
    f = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2.0 * dx)
    # four-point one-sided ends (third order, error below the interior's);
    # written in differences so constants give exactly zero
    out[0] = (18.0 * (f[1] - f[0]) - 9.0 * (f[2] - f[0]) + 2.0 * (f[3] - f[0])) / (6.0 * dx)
    out[-1] = (18.0 * (f[-1] - f[-2]) - 9.0 * (f[-1] - f[-3]) + 2.0 * (f[-1] - f[-4])) / (6.0 * dx)
    return np.moveaxis(out, 0, axis)


def _d2(values: np.ndarray, dx: float, axis: int) -> np.ndarray:
    f = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[1:-1]) - (f[1:-1] - f[:-2])
    # one-sided second-order ends, in differences as above
    out[0] = -5.0 * (f[1] - f[0]) + 4.0 * (f[2] - f[0]) - (f[3] - f[0])
    out[-1] = -5.0 * (f[-2] - f[-1]) + 4.0 * (f[-3] - f[-1]) - (f[-4] - f[-1])
    return np.moveaxis(out / (dx * dx), 0, axis)


def gradient(f: ScalarField) -> VectorField:
    """Central differences inside, one-sided (third order) at the boundary."""
    grid = f.grid
    comps = tuple(_d1(f.values, grid.spacing[ax], ax) for ax in range(grid.dim))
    return VectorField(grid, comps, f.mask)


def divergence(v: VectorField) -> ScalarField:
    grid = v.grid
    div = sum(_d1(c, grid.spacing[ax], ax) for ax, c in enumerate(v.components))
    return ScalarField(grid, div, v.mask)


def laplacian(f: ScalarField) -> ScalarField:
    grid = f.grid
    lap = sum(_d2(f.values, grid.spacing[ax], ax) for ax in range(grid.dim))
    return ScalarField(grid, lap, f.mask)


def gradient_array(grid: Grid, values: np.ndarray) -> tuple[np.ndarray, ...]:
    return tuple(_d1(values, grid.spacing[ax], ax) for ax in range(grid.dim))


def laplacian_array(grid: Grid, values: np.ndarray) -> np.ndarray:
    return sum(_d2(values, grid.spacing[ax], ax) for ax in range(grid.dim))


def wrap_phase(delta: np.ndarray, period: float = TWO_PI) -> np.ndarray:
    """Map differences into ``[-period/2, period/2)``."""
    half = 0.5 * period
    return np.mod(delta + half, period) - half


def phase_gradient(S: ScalarField, hbar: float) -> VectorField:
    """Gradient of an action field with differences taken modulo ``2*pi*hbar``.

    Same stencils as :func:`gradient`; any 2*pi*hbar offsets left by
    unwrapping (e.g. between 2D rows) drop out.
    """
    grid = S.grid
    period = TWO_PI * hbar
    comps = []
    for ax in range(grid.dim):
        s = np.moveaxis(np.asarray(S.values), ax, 0)
        d = np.empty_like(s)
        h = grid.spacing[ax]
        d[1:-1] = wrap_phase(s[2:] - s[:-2], period) / (2 * h)
        d1, d2, d3 = (wrap_phase(s[j] - s[0], period) for j in (1, 2, 3))
        d[0] = (18 * d1 - 9 * d2 + 2 * d3) / (6 * h)
        e1, e2, e3 = (wrap_phase(s[-1] - s[-1 - j], period) for j in (1, 2, 3))
        d[-1] = (18 * e1 - 9 * e2 + 2 * e3) / (6 * h)
        comps.append(np.moveaxis(d, 0, ax))
    return VectorField(grid, tuple(comps), S.mask)


# ---------------------------------------------------------------------------
# Madelung map
# ---------------------------------------------------------------------------

def _unwrap_line(phase: np.ndarray, valid: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return np.zeros_like(phase)
    unwrapped = np.unwrap(phase[idx])
    if idx.size == phase.size:
        return unwrapped
    # masked points keep their raw phase, shifted by 2*pi multiples toward a
    # continuous filler, so wrapped differences at the mask edge stay exact
    filler = np.interp(np.arange(phase.size), idx, unwrapped)
    out = filler + wrap_phase(phase - filler)
    out[idx] = unwrapped
    return out


def unwrap(phase: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Sequential 1D unwrapping; in 2D each row is unwrapped, then rows are
    anchored by unwrapping the first column."""
    phase = np.asarray(phase, dtype=float)
    if valid is None:
        valid = np.ones(phase.shape, dtype=bool)
    if phase.ndim == 1:
        return _unwrap_line(phase, valid)
    out = np.empty_like(phase)
    row_ok = valid.any(axis=1)
    for i in range(phase.shape[0]):
        out[i] = _unwrap_line(phase[i], valid[i])
    rows = np.flatnonzero(row_ok)
    if rows.size:
        anchor = out[rows, 0]
        shift = np.unwrap(anchor) - anchor
        out[rows] += shift[:, None]
        # fully masked rows copy the nearest valid row
        if rows.size < phase.shape[0]:
            nearest = rows[np.abs(np.arange(phase.shape[0])[:, None] - rows[None, :]).argmin(axis=1)]
            out = np.where(row_ok[:, None], out, out[nearest])
    else:
        out[:] = 0.0
    return out


def decompose(psi: WaveFunction, eps_node: float | None = None) -> MadelungState:
    """Split psi into (P, S) with psi = sqrt(P) exp(+i S / hbar).

    ``eps_node`` is an absolute density threshold; the default is
    ``1e-12 * max(P)``.
    """
    P = psi.density
    pmax = float(P.max())
    if eps_node is None:
        eps_node = 1e-12 * pmax
    if eps_node <= 0 and pmax > 0:
        raise ValueError("eps_node must be positive")
    node = P < eps_node
    if pmax == 0 or node.all():
        raise ValueError("wave function is numerically zero on the whole grid")
    hbar = psi.consts.hbar
    S = hbar * unwrap(np.angle(psi.values), ~node)
    return MadelungState(
        P=ScalarField(psi.grid, P),
        S=ScalarField(psi.grid, S, node),
        node_mask=node,
        consts=psi.consts,
    )


def recompose(state: MadelungState) -> WaveFunction:
    hbar = state.consts.hbar
    amp = np.sqrt(state.P.values)
    values = amp * np.exp(1j * state.S.values / hbar)
    values = np.where(state.node_mask, 0.0, values)
    return WaveFunction(state.grid, values, state.consts)


def normalize(P: ScalarField) -> ScalarField:
    values = np.asarray(P.values)
    if np.any(values < 0):
        raise ValueError("density must be non-negative")
    total = integrate(P.grid, values)
    if not total > 0:
        raise ValueError("cannot normalize an all-zero density")
    return ScalarField(P.grid, values / total, P.mask)


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_field_csv(f: ScalarField | VectorField, path: str | Path) -> Path:
    """Row-major CSV, one row per grid point, 17 significant digits."""
    grid = f.grid
    coords = [c.ravel() for c in grid.mesh()]
    names = [f"axis{ax}" for ax in range(grid.dim)]
    if isinstance(f, ScalarField):
        cols = [np.asarray(f.values).ravel()]
        names.append("value")
    else:
        cols = [np.asarray(c).ravel() for c in f.components]
        names += ["vx", "vy"][: grid.dim]
    table = np.column_stack(coords + cols)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# " + ",".join(names) + "\n")
        for row in table:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def read_field_csv(path: str | Path, grid: Grid) -> ScalarField | VectorField:
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    cols = data[:, grid.dim:]
    if cols.shape[1] == 1:
        return ScalarField(grid, cols[:, 0].reshape(grid.shape))
    return VectorField(grid, tuple(cols[:, i].reshape(grid.shape) for i in range(cols.shape[1])))


def as_values(f: ScalarField | np.ndarray | float, grid: Grid) -> np.ndarray:
    if isinstance(f, ScalarField):
        return np.asarray(f.values)
    return np.broadcast_to(np.asarray(f, dtype=float), grid.shape)


__all__: Sequence[str] = (
    "Grid", "PhysicsConstants", "ScalarField", "VectorField", "WaveFunction", "MadelungState",
    "integrate", "gradient", "divergence", "laplacian", "phase_gradient", "decompose",
    "recompose", "normalize", "unwrap", "wrap_phase", "write_field_csv", "read_field_csv",
)
