"""Run orchestration: evolve a scenario and write its artifacts.

Layout under the output directory::

    fields/t{index}_{name}.csv
    dots/N{count}.pgm, dots/N{count}.csv
    diagnostics/{name}.json
    manifest.json            (written last)
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (
    continuity_residual,
    hjb_residual_pair,
    orthogonality_index,
    zero_point_identity,
)
from .fields import ScalarField, WaveFunction, decompose, write_field_csv
from .hydro import fluctuation_magnitude, ku_field, quantum_potential, velocity_field, wavefront_speed
from .propagator import evolve
from .scenario import DIAGNOSTIC_NAMES, Scenario
from .stochastic import isotropy_report, verify_rms, verify_unbiasedness
from .trajectories import (
    NODE_STALLED,
    DotExperiment,
    accumulate_dots,
    dot_image,
    run_dot_experiment,
    write_pgm,
)

log = logging.getLogger(__name__)

#: rows of the dot images
DOT_IMAGE_HEIGHT = 128
#: Monte-Carlo samples per fluctuation report
FLUCTUATION_SAMPLES = 200_000


@dataclass
class RunManifest:
    scenario: dict
    version: str
    seed: int
    wall_time: float = 0.0
    norm_drift: float = 0.0
    warnings: list[str] = field(default_factory=list)
    files: list[dict] = field(default_factory=list)
    diagnostics: dict[str, bool] = field(default_factory=dict)
    ensemble: dict | None = None
    partial: bool = False
    error: str | None = None
    #: in-memory dot experiment of the run; not written to disk
    experiment: DotExperiment | None = field(default=None, repr=False, compare=False)

    @property
    def diagnostics_passed(self) -> bool:
        return all(self.diagnostics.values())

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "wall_time_s": self.wall_time,
            "norm_drift": self.norm_drift,
            "warnings": self.warnings,
            "diagnostics": self.diagnostics,
            "ensemble": self.ensemble,
            "partial": self.partial,
            "error": self.error,
            "files": self.files,
            "scenario": self.scenario,
        }


class _Writer:
    """Tracks emitted files with their checksums."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[dict] = []

    def record(self, path: Path) -> Path:
        data = path.read_bytes()
        self.files.append({"path": path.relative_to(self.root).as_posix(),
                           "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
        return path

    def json(self, rel: str, payload) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        return self.record(path)


def _field_set(names, state0, state1, span: float, consts):
    """Requested derived fields at ``state0`` (``u`` uses the pair)."""
    out = {}
    for name in names:
        if name == "P":
            out[name] = state0.P
        elif name == "S":
            out[name] = ScalarField(state0.grid, state0.S.values, state0.node_mask)
        elif name == "v":
            out[name] = velocity_field(state0, consts)
        elif name == "ku":
            out[name] = ku_field(state0.P)
        elif name == "dp":
            out[name] = fluctuation_magnitude(state0.P, consts)
        elif name == "Q":
            out[name] = quantum_potential(state0.P, consts, check=False)
        elif name == "u":
            out[name] = wavefront_speed(state0, state1, span)
    return out


class _FieldDumper:
    """Writes fields for every ``stride``-th snapshot and the last one.

    Output for a snapshot is deferred until the next snapshot arrives so
    that the wavefront speed can use a forward difference.
    """

    def __init__(self, scenario: Scenario, writer: _Writer):
        self.names = scenario.output.fields
        self.stride = scenario.output.field_stride
        self.consts = scenario.consts
        self.writer = writer
        self.pending: tuple[int, float, WaveFunction] | None = None

    def wanted(self, index: int) -> bool:
        return self.stride > 0 and index % self.stride == 0

    def __call__(self, index: int, t: float, psi: WaveFunction) -> None:
        if not self.names:
            return
        if self.pending is not None:
            i0, t0, psi0 = self.pending
            self._write(i0, decompose(psi0), decompose(psi), t - t0)
        self.pending = (index, t, psi) if self.wanted(index) else None

    def finish(self, index: int, previous: WaveFunction | None, final: WaveFunction,
               dt: float) -> None:
        if not self.names:
            return
        self.pending = None
        s1 = decompose(final)
        s0 = decompose(previous) if previous is not None else s1
        # backward difference for the last snapshot
        fields = _field_set(self.names, s1, s1, dt, self.consts)
        if "u" in self.names and previous is not None:
            fields["u"] = wavefront_speed(s0, s1, dt)
        self._emit(index, fields)

    def _write(self, index, state0, state1, span):
        self._emit(index, _field_set(self.names, state0, state1, span, self.consts))

    def _emit(self, index, fields):
        for name in self.names:
            path = self.writer.root / "fields" / f"t{index}_{name}.csv"
            self.writer.record(write_field_csv(fields[name], path))


def _diagnostics(scenario: Scenario, names, previous: WaveFunction, final: WaveFunction,
                 writer: _Writer, seed: int) -> dict[str, bool]:
    out = {}
    dt = scenario.time.dt
    tol = scenario.output.residual_tol
    floor = scenario.output.density_floor
    V = scenario.potential().evaluate(scenario.grid, scenario.consts)
    s0, s1 = decompose(previous), decompose(final)
    for name in DIAGNOSTIC_NAMES:
        if name not in names:
            continue
        if name == "continuity":
            payload = continuity_residual(s0, s1, dt, tol, floor).to_dict()
        elif name == "hjb":
            payload = hjb_residual_pair(s0, s1, dt, V, tol, floor).to_dict()
        elif name == "zero_point":
            payload = zero_point_identity(s0, s1, dt, V, psi=final, threshold=tol,
                                          floor=floor).to_dict()
        elif name == "orthogonality":
            index = orthogonality_index(s1)
            payload = {"name": "orthogonality", "index": index,
                       "classification": "trivial" if index <= 1e-12 else "nontrivial",
                       "pass": True}
        else:
            P = ScalarField(scenario.grid, final.density / final.norm())
            hbar = scenario.consts.hbar
            reports = [verify_rms(P, FLUCTUATION_SAMPLES, seed, hbar),
                       verify_unbiasedness(P, s1.S, FLUCTUATION_SAMPLES, seed, hbar),
                       isotropy_report(scenario.grid.dim, FLUCTUATION_SAMPLES, seed)]
            payload = {"name": "fluctuations", "reports": [r.to_dict() for r in reports],
                       "pass": all(r.passed for r in reports)}
        writer.json(f"diagnostics/{name}.json", payload)
        out[name] = bool(payload["pass"])
    return out


def _dots(scenario: Scenario, exp, writer: _Writer, warnings: list[str]) -> None:
    spec = scenario.trajectories
    window = spec.window(scenario.grid) if exp.screen is not None else None
    stages = list(scenario.output.staged_dots)
    if not stages:
        stages = [None]
    for n in stages:
        pat = accumulate_dots(exp.ensemble, exp.screen, spec.bins, limit=n,
                              grid=scenario.grid, window=window)
        recorded = int(pat.counts.sum())
        if n is not None and recorded < n:
            warnings.append(f"only {recorded} dots recorded, fewer than the requested {n}")
        label = n if n is not None else recorded
        writer.record(pat.to_csv(writer.root / "dots" / f"N{label}.csv"))
        if exp.screen is not None:
            image = dot_image(exp.ensemble, exp.screen, pat.bin_edges, DOT_IMAGE_HEIGHT,
                              limit=n, window=window)
        else:
            image = pat.gray_row()[None, :]
        writer.record(write_pgm(writer.root / "dots" / f"N{label}.pgm", image))


def run(scenario: Scenario, out_dir: str | Path, seed: int | None = None,
        diagnostics: tuple[str, ...] | None = None, outputs: bool = True) -> RunManifest:
    """Execute a scenario and write its artifacts; ``manifest.json`` last.

    ``diagnostics`` overrides the scenario's list; ``outputs=False`` skips
    field and dot files.
    """
    if seed is not None:
        scenario = scenario.with_seed(seed)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    writer = _Writer(root)
    manifest = RunManifest(scenario.echo(), __version__, scenario.trajectories.seed)
    names = scenario.output.diagnostics if diagnostics is None else diagnostics
    start = time.perf_counter()
    try:
        out = scenario.output
        dumper = _FieldDumper(scenario, writer) if outputs else None
        last = [0]

        def hook(index: int, t: float, psi: WaveFunction) -> None:
            last[0] = index
            if dumper is not None:
                dumper(index, t, psi)

        want_dots = outputs and (out.dots or bool(out.staged_dots))
        if want_dots:
            exp = run_dot_experiment(scenario, snapshot_hook=hook)
            final, previous = exp.final, exp.previous
            norms, warns = exp.norm_history, exp.warnings
        else:
            result = evolve(scenario, on_snapshot=hook, keep_snapshots=False)
            final, previous = result.final, result.previous
            norms, warns = result.norm_history, result.warnings
        manifest.warnings.extend(warns)
        n0 = norms[0]
        manifest.norm_drift = float(max(abs(n - n0) for n in norms) / n0)
        if dumper is not None:
            dumper.finish(last[0], previous, final, scenario.time.dt)
        if want_dots:
            manifest.experiment = exp
            manifest.ensemble = exp.ensemble.summary()
            stalled = exp.ensemble.count(NODE_STALLED)
            if stalled:
                manifest.warnings.append(f"{stalled} particles stalled at nodes")
            _dots(scenario, exp, writer, manifest.warnings)
        if names:
            if previous is None:
                raise ValueError("diagnostics need at least one time step")
            manifest.diagnostics = _diagnostics(scenario, names, previous, final, writer,
                                                scenario.trajectories.seed)
    except Exception as exc:
        manifest.partial = True
        manifest.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest.wall_time = time.perf_counter() - start
        manifest.files = list(writer.files)
        (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2) + "\n",
                                            encoding="utf-8")
    for w in manifest.warnings:
        log.warning(w)
    return manifest


def diagnose(scenario: Scenario, out_dir: str | Path) -> RunManifest:
    """Evolution plus every diagnostic report; no field or dot files."""
    return run(scenario, out_dir, diagnostics=DIAGNOSTIC_NAMES, outputs=False)


def doubleslit_scenario(counts=None, seed: int | None = None) -> Scenario:
    """Shipped double-slit scenario with the given staged dot counts.

    ``None`` keeps the shipped stages. The particle count grows in
    proportion when more than the shipped number of dots is asked for.
    """
    from .scenario import shipped_scenario

    base = shipped_scenario("doubleslit")
    if counts is None:
        counts = base.output.staged_dots
    counts = tuple(sorted(set(int(n) for n in counts)))
    if not counts or counts[0] < 1:
        raise ValueError("dot counts must be positive integers")
    shipped_max = max(base.output.staged_dots)
    n = base.trajectories.n_particles
    if counts[-1] > shipped_max:
        n = int(np.ceil(n * counts[-1] / shipped_max))
    sc = replace(base, trajectories=replace(base.trajectories, n_particles=n),
                 output=replace(base.output, staged_dots=counts, dots=True))
    return sc.with_seed(seed) if seed is not None else sc
