"""Scenario files: a small INI dialect with strict validation.

Sections are ``[grid] [time] [physics] [initial] [potential] [slits]
[trajectories] [output]``; ``key = value`` lines; ``#`` starts a comment.
Unknown sections or keys are errors, and every error carries the line
number and key name it refers to.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import eval_hermite, gammaln
from scipy.linalg import eigh_tridiagonal

from .fields import Grid, PhysicsConstants, WaveFunction, normalize, ScalarField
from .propagator import Potential, SlitGeometry

FIELD_NAMES = ("P", "S", "v", "ku", "dp", "Q", "u")
DIAGNOSTIC_NAMES = ("continuity", "hjb", "zero_point", "orthogonality", "fluctuations")


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line, self.key, self.detail = line, key, message
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeSpec:
    dt: float
    n_steps: int
    snapshot_stride: int = 1


@dataclass(frozen=True)
class InitialSpec:
    kind: str
    x0: tuple[float, ...] = (0.0, 0.0)
    sigma: tuple[float, ...] = (1.0, 1.0)
    k0: tuple[float, ...] = (0.0, 0.0)
    omega: float = 1.0
    mode: tuple[int, ...] = (0, 0)


@dataclass(frozen=True)
class PotentialSpec:
    kind: str = "free"
    omega: float = 1.0
    center: tuple[float, ...] = (0.0, 0.0)


@dataclass(frozen=True)
class TrajectorySpec:
    n_particles: int = 0
    seed: int = 0
    screen_x: float | None = None
    bins: int = 128
    screen_half_width: float | None = None

    def window(self, grid: Grid) -> tuple[float, float]:
        """Transverse recording window of the screen (whole axis by default)."""
        if self.screen_half_width is None:
            ax = 1 if grid.dim == 2 else 0
            return float(grid.lo[ax]), float(grid.hi[ax])
        return -self.screen_half_width, self.screen_half_width


@dataclass(frozen=True)
class OutputSpec:
    fields: tuple[str, ...] = ()
    field_stride: int = 0
    dots: bool = False
    staged_dots: tuple[int, ...] = ()
    diagnostics: tuple[str, ...] = ()
    residual_tol: float = 1e-2
    density_floor: float = 1e-4


@dataclass(frozen=True)
class Scenario:
    name: str
    grid: Grid
    time: TimeSpec
    consts: PhysicsConstants = field(default_factory=PhysicsConstants)
    initial: InitialSpec = field(default_factory=lambda: InitialSpec("gaussian"))
    potential_spec: PotentialSpec = field(default_factory=PotentialSpec)
    slits: SlitGeometry | None = None
    trajectories: TrajectorySpec = field(default_factory=TrajectorySpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    source: str = ""

    def potential(self) -> Potential:
        ps = self.potential_spec
        if ps.kind == "harmonic":
            return Potential.harmonic(ps.omega, ps.center)
        if ps.kind == "barrier":
            return Potential.barrier(self.slits)
        return Potential.free()

    def with_slits(self, slits: SlitGeometry) -> "Scenario":
        return replace(self, slits=slits)

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, trajectories=replace(self.trajectories, seed=int(seed)))

    def initial_wavefunction(self) -> WaveFunction:
        return initial_state(self.grid, self.initial, self.consts)

    def echo(self) -> dict:
        g = self.grid
        return {
            "name": self.name,
            "grid": {"n": list(g.n), "lo": list(g.lo), "hi": list(g.hi)},
            "time": vars(self.time),
            "physics": {"hbar": self.consts.hbar, "mass": self.consts.mass, "c": self.consts.c},
            "initial": {"kind": self.initial.kind, "x0": list(self.initial.x0),
                        "sigma": list(self.initial.sigma), "k0": list(self.initial.k0),
                        "omega": self.initial.omega, "mode": list(self.initial.mode)},
            "potential": {"kind": self.potential_spec.kind, "omega": self.potential_spec.omega,
                          "center": list(self.potential_spec.center)},
            "slits": None if self.slits is None else {
                "barrier_x": self.slits.barrier_x, "thickness": self.slits.barrier_thickness,
                "centers": list(self.slits.slit_centers), "width": self.slits.slit_width,
                "height": self.slits.barrier_height},
            "trajectories": vars(self.trajectories),
            "output": {k: list(v) if isinstance(v, tuple) else v
                       for k, v in vars(self.output).items()},
        }


# ---------------------------------------------------------------------------
# initial states
# ---------------------------------------------------------------------------

def _hermite_function(n: int, xi: np.ndarray) -> np.ndarray:
    """Normalised Hermite function in the dimensionless coordinate xi."""
    log_norm = -0.5 * (n * math.log(2.0) + gammaln(n + 1) + 0.5 * math.log(math.pi))
    return np.exp(log_norm - 0.5 * xi * xi) * eval_hermite(n, xi)


def lattice_eigenmode(x: np.ndarray, n: int, omega: float, center: float,
                      consts: PhysicsConstants) -> np.ndarray:
    """Mode ``n`` of the discrete oscillator Hamiltonian on the line ``x``.

    Same three-point stencil and zero end values as the steppers, so the
    mode evolves by a pure phase. The sign matches the Hermite function.
    """
    hbar, m = consts.hbar, consts.mass
    h = float(x[1] - x[0])
    inner = x[1:-1]
    a = hbar ** 2 / (2.0 * m * h * h)
    diag = 2.0 * a + 0.5 * m * omega ** 2 * (inner - center) ** 2
    _, vec = eigh_tridiagonal(diag, np.full(inner.size - 1, -a), select="i",
                              select_range=(n, n))
    out = np.zeros(x.size)
    out[1:-1] = vec[:, 0]
    ref = _hermite_function(n, (x - center) * math.sqrt(m * omega / hbar))
    return out if np.dot(out, ref) >= 0 else -out


def initial_state(grid: Grid, spec: InitialSpec, consts: PhysicsConstants) -> WaveFunction:
    mesh = grid.mesh()
    hbar, m = consts.hbar, consts.mass
    psi = np.ones(grid.shape, dtype=complex)
    for ax, x in enumerate(mesh):
        if spec.kind == "gaussian":
            s = spec.sigma[ax]
            psi = psi * np.exp(-((x - spec.x0[ax]) ** 2) / (4.0 * s * s)
                               + 1j * spec.k0[ax] * x)
        elif spec.kind == "plane_wave":
            psi = psi * np.exp(1j * spec.k0[ax] * x)
        elif spec.kind in ("harmonic_ground", "eigenmode"):
            n = spec.mode[ax] if spec.kind == "eigenmode" else 0
            line = lattice_eigenmode(grid.axes[ax], n, spec.omega, spec.x0[ax], consts)
            shape = [1] * grid.dim
            shape[ax] = -1
            psi = psi * line.reshape(shape)
        else:
            raise ScenarioError(f"unknown initial kind {spec.kind!r}", key="kind")
    # Dirichlet walls: the steppers hold psi = 0 on the outer boundary
    for ax in range(grid.dim):
        edge = [slice(None)] * grid.dim
        edge[ax] = [0, -1]
        psi[tuple(edge)] = 0.0
    wf = WaveFunction(grid, psi, consts)
    return wf.normalized()


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_SECTIONS = ("grid", "time", "physics", "initial", "potential", "slits", "trajectories", "output")
_KEYS = {
    "grid": {"dim", "n", "nx", "ny", "x_min", "x_max", "y_min", "y_max"},
    "time": {"dt", "n_steps", "snapshot_stride"},
    "physics": {"hbar", "mass", "c"},
    "initial": {"kind", "x0", "y0", "sigma", "sigma_x", "sigma_y", "k0", "kx", "ky", "k",
                "omega", "n", "ny"},
    "potential": {"kind", "omega", "x0", "y0"},
    "slits": {"barrier_x", "thickness", "centers", "width", "height"},
    "trajectories": {"n_particles", "seed", "screen_x", "bins", "screen_half_width"},
    "output": {"fields", "field_stride", "dots", "staged_dots", "diagnostics",
               "residual_tol", "density_floor"},
}
_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$")
_HEADER = re.compile(r"^\s*\[\s*([A-Za-z_]+)\s*\]\s*$")


class _Section:
    def __init__(self, name: str, line: int):
        self.name, self.line = name, line
        self.items: dict[str, tuple[str, int]] = {}
        self.used: set[str] = set()

    def has(self, key: str) -> bool:
        return key in self.items

    def line_of(self, key: str) -> int:
        return self.items[key][1] if key in self.items else self.line

    def raw(self, key: str) -> tuple[str, int]:
        self.used.add(key)
        return self.items[key]

    def float(self, key, default=None, positive=False, nonneg=False):
        if key not in self.items:
            if default is None:
                raise ScenarioError(f"missing required key in [{self.name}]", self.line, key)
            return default
        text, line = self.raw(key)
        try:
            val = float(text)
        except ValueError:
            raise ScenarioError(f"expected a number, got {text!r}", line, key) from None
        if not math.isfinite(val):
            raise ScenarioError("value must be finite", line, key)
        if positive and not val > 0:
            raise ScenarioError(f"{key} must be positive", line, key)
        if nonneg and val < 0:
            raise ScenarioError(f"{key} must be non-negative", line, key)
        return val

    def int(self, key, default=None, minimum=None, maximum=None):
        if key not in self.items:
            if default is None:
                raise ScenarioError(f"missing required key in [{self.name}]", self.line, key)
            return default
        text, line = self.raw(key)
        try:
            val = int(text, 0)
        except ValueError:
            raise ScenarioError(f"expected an integer, got {text!r}", line, key) from None
        if minimum is not None and val < minimum:
            raise ScenarioError(f"{key} must be >= {minimum}", line, key)
        if maximum is not None and val > maximum:
            raise ScenarioError(f"{key} must be <= {maximum}", line, key)
        return val

    def str(self, key, default=None, choices=None):
        if key not in self.items:
            if default is None:
                raise ScenarioError(f"missing required key in [{self.name}]", self.line, key)
            return default
        text, line = self.raw(key)
        if choices is not None and text not in choices:
            raise ScenarioError(f"expected one of {', '.join(choices)}; got {text!r}", line, key)
        return text

    def bool(self, key, default=False):
        if key not in self.items:
            return default
        text, line = self.raw(key)
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ScenarioError(f"expected a boolean, got {text!r}", line, key)

    def list(self, key, convert=None) -> tuple:
        if key not in self.items:
            return ()
        text, line = self.raw(key)
        parts = [p.strip() for p in text.strip("[]").split(",") if p.strip()]
        try:
            return tuple(convert(p) if convert else p for p in parts)
        except ValueError:
            raise ScenarioError(f"malformed list {text!r}", line, key) from None


def _read_sections(text: str) -> dict[str, _Section]:
    sections: dict[str, _Section] = {}
    current: _Section | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        head = _HEADER.match(line)
        if head:
            name = head.group(1).lower()
            if name not in _SECTIONS:
                raise ScenarioError(f"unknown section [{name}]", lineno)
            if name in sections:
                raise ScenarioError(f"duplicate section [{name}]", lineno)
            current = sections[name] = _Section(name, lineno)
            continue
        kv = _LINE.match(line)
        if not kv:
            raise ScenarioError(f"malformed line {raw.strip()!r}", lineno)
        if current is None:
            raise ScenarioError("key outside of any section", lineno, kv.group(1))
        key, value = kv.group(1).lower(), kv.group(2)
        if key not in _KEYS[current.name]:
            raise ScenarioError(f"unknown key in [{current.name}]", lineno, key)
        if key in current.items:
            raise ScenarioError("duplicate key", lineno, key)
        if value == "":
            raise ScenarioError("empty value", lineno, key)
        current.items[key] = (value, lineno)
    return sections


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    sections = _read_sections(text)
    for required in ("grid", "time", "initial"):
        if required not in sections:
            raise ScenarioError(f"missing section [{required}]")

    g = sections["grid"]
    dim = g.int("dim", 1, minimum=1, maximum=2)
    if dim == 1:
        for k in ("ny", "y_min", "y_max"):
            if g.has(k):
                raise ScenarioError("only valid for dim = 2", g.line_of(k), k)
        n = g.int("n", None, minimum=8) if not g.has("nx") else g.int("nx", None, minimum=8)
        x_min, x_max = g.float("x_min"), g.float("x_max")
        if not x_max > x_min:
            raise ScenarioError("x_max must exceed x_min", g.line_of("x_max"), "x_max")
        grid = Grid.line(n, x_min, x_max)
    else:
        n_default = g.int("n", 0, minimum=8) if g.has("n") else None
        nx = g.int("nx", n_default, minimum=8)
        ny = g.int("ny", n_default, minimum=8)
        x_min, x_max = g.float("x_min"), g.float("x_max")
        y_min, y_max = g.float("y_min", x_min), g.float("y_max", x_max)
        if not x_max > x_min:
            raise ScenarioError("x_max must exceed x_min", g.line_of("x_max"), "x_max")
        if not y_max > y_min:
            raise ScenarioError("y_max must exceed y_min", g.line_of("y_max"), "y_max")
        grid = Grid.plane(nx, x_min, x_max, ny, y_min, y_max)

    t = sections["time"]
    if t.has("dt") and t.float("dt") <= 0:
        raise ScenarioError("dt must be positive", t.line_of("dt"), "dt")
    time = TimeSpec(t.float("dt", positive=True), t.int("n_steps", None, minimum=0),
                    t.int("snapshot_stride", 1, minimum=1))

    if "physics" in sections:
        p = sections["physics"]
        consts = PhysicsConstants(p.float("hbar", 1.0, positive=True),
                                  p.float("mass", 1.0, positive=True),
                                  p.float("c", 1.0, positive=True))
    else:
        consts = PhysicsConstants()

    i = sections["initial"]
    kind = i.str("kind", None, ("gaussian", "plane_wave", "harmonic_ground", "eigenmode"))
    sig = i.float("sigma", 1.0, positive=True)
    k0 = i.float("k", 0.0) if i.has("k") else i.float("k0", 0.0)
    initial = InitialSpec(
        kind=kind,
        x0=(i.float("x0", 0.0), i.float("y0", 0.0)),
        sigma=(i.float("sigma_x", sig, positive=True), i.float("sigma_y", sig, positive=True)),
        k0=(i.float("kx", k0), i.float("ky", 0.0)),
        omega=i.float("omega", 1.0, positive=True),
        mode=(i.int("n", 0, minimum=0), i.int("ny", 0, minimum=0)),
    )

    pot = sections.get("potential")
    if pot is not None:
        pspec = PotentialSpec(pot.str("kind", "free", ("free", "harmonic", "barrier")),
                              pot.float("omega", initial.omega, positive=True),
                              (pot.float("x0", 0.0), pot.float("y0", 0.0)))
    else:
        pspec = PotentialSpec()
    if kind in ("harmonic_ground", "eigenmode"):
        if pspec.kind != "harmonic":
            raise ScenarioError(f"initial kind {kind} requires a harmonic potential",
                                i.line_of("kind"), "kind")
        if not math.isclose(pspec.omega, initial.omega) or pspec.center[:dim] != initial.x0[:dim]:
            raise ScenarioError("eigenstate must match the potential's omega and centre",
                                i.line_of("kind"), "kind")

    slits = None
    if "slits" in sections:
        s = sections["slits"]
        if dim != 2:
            raise ScenarioError("slits require 2D grid", s.line, "slits")
        centers = s.list("centers", float)
        if not centers:
            raise ScenarioError("missing required key in [slits]", s.line, "centers")
        try:
            slits = SlitGeometry(s.float("barrier_x"), s.float("thickness", positive=True),
                                 centers, s.float("width", positive=True),
                                 s.float("height", nonneg=True))
            slits.validate(grid)
        except ScenarioError:
            raise
        except ValueError as exc:
            raise ScenarioError(str(exc), s.line, "slits") from None
    if pspec.kind == "barrier" and slits is None:
        raise ScenarioError("barrier potential requires a [slits] section",
                            pot.line_of("kind"), "kind")
    if slits is not None and pspec.kind != "barrier":
        raise ScenarioError("[slits] given but potential kind is not barrier",
                            sections["slits"].line, "kind")

    tr = sections.get("trajectories")
    if tr is not None:
        screen_x = tr.float("screen_x") if tr.has("screen_x") else None
        half = tr.float("screen_half_width", positive=True) if tr.has("screen_half_width") else None
        traj = TrajectorySpec(tr.int("n_particles", 0, minimum=0),
                              tr.int("seed", 0, minimum=0, maximum=2 ** 64 - 1),
                              screen_x, tr.int("bins", 128, minimum=1), half)
        if half is not None:
            if screen_x is None:
                raise ScenarioError("screen_half_width requires screen_x",
                                    tr.line_of("screen_half_width"), "screen_half_width")
            if dim == 2 and (-half < grid.lo[1] or half > grid.hi[1]):
                raise ScenarioError("screen window exceeds the grid",
                                    tr.line_of("screen_half_width"), "screen_half_width")
        if screen_x is not None:
            if dim != 2:
                raise ScenarioError("screen requires a 2D grid", tr.line_of("screen_x"), "screen_x")
            if not grid.lo[0] < screen_x < grid.hi[0]:
                raise ScenarioError("screen must lie inside the grid",
                                    tr.line_of("screen_x"), "screen_x")
            if slits is not None and screen_x <= slits.barrier_x:
                raise ScenarioError("screen must lie beyond the barrier",
                                    tr.line_of("screen_x"), "screen_x")
    else:
        traj = TrajectorySpec()

    o = sections.get("output")
    if o is not None:
        fields_ = o.list("fields")
        for f in fields_:
            if f not in FIELD_NAMES:
                raise ScenarioError(f"unknown field {f!r}", o.line_of("fields"), "fields")
        diags = o.list("diagnostics")
        for d in diags:
            if d not in DIAGNOSTIC_NAMES:
                raise ScenarioError(f"unknown diagnostic {d!r}", o.line_of("diagnostics"),
                                    "diagnostics")
        staged = o.list("staged_dots", int)
        if any(n < 1 for n in staged) or list(staged) != sorted(set(staged)):
            raise ScenarioError("staged_dots must be increasing positive integers",
                                o.line_of("staged_dots"), "staged_dots")
        output = OutputSpec(fields_, o.int("field_stride", 0, minimum=0), o.bool("dots"),
                            staged, diags, o.float("residual_tol", 1e-2, positive=True),
                            o.float("density_floor", 1e-4, positive=True))
        if (output.dots or staged) and traj.n_particles < 1:
            raise ScenarioError("dot output needs [trajectories] n_particles >= 1",
                                o.line_of("dots" if o.has("dots") else "staged_dots"), "dots")
        if staged and staged[-1] > traj.n_particles:
            raise ScenarioError("largest staged count exceeds n_particles",
                                o.line_of("staged_dots"), "staged_dots")
    else:
        output = OutputSpec()

    for sec in sections.values():
        leftover = set(sec.items) - sec.used
        for key in sorted(leftover, key=sec.line_of):
            raise ScenarioError(f"key not applicable here", sec.line_of(key), key)

    return Scenario(name, grid, time, consts, initial, pspec, slits, traj, output, text)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), name=path.stem)


def shipped_scenario(name: str) -> Scenario:
    """Load one of the scenario files bundled with the package."""
    from importlib import resources

    ref = resources.files("pilotwave.scenarios").joinpath(f"{name}.ini")
    return parse_scenario(ref.read_text(encoding="utf-8"), name=name)
