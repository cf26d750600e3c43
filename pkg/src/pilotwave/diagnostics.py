"""Residuals and indices for the hydrodynamic form of the dynamics.

Reports cover continuity, the Hamilton-Jacobi-Bohm equation, the
orthogonality (triviality) index, the zero-point identity and the
relativistic variable-mass field. Residual norms are taken over interior
points (two-point boundary layer excluded) that are off the node mask and
above a density floor relative to the maximum.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .fields import (
    MadelungState,
    PhysicsConstants,
    ScalarField,
    TWO_PI,
    WaveFunction,
    as_values,
    integrate,
    laplacian_array,
    phase_gradient,
    wrap_phase,
)
from .hydro import NODE_EPS, ku_field, quantum_potential, velocity_field
from .propagator import energy

#: denominator guard of the orthogonality index
ORTHO_EPS = 1e-30
#: below this denominator integral the index is declared 0
ORTHO_FLOOR = 1e-12
DEFAULT_FLOOR = 1e-4
BOUNDARY_LAYER = 2


@dataclass
class DiagnosticReport:
    name: str
    l_inf: float
    l2: float
    threshold: float
    passed: bool
    metadata: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "l_inf": self.l_inf, "l2": self.l2,
                "threshold": self.threshold, "pass": bool(self.passed),
                "metadata": self.metadata, **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _interior(shape: tuple[int, ...], layer: int = BOUNDARY_LAYER) -> np.ndarray:
    keep = np.zeros(shape, dtype=bool)
    keep[tuple(slice(layer, n - layer) for n in shape)] = True
    return keep


def evaluation_mask(states, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Points that count towards residual norms (True = evaluated)."""
    keep = _interior(states[0].grid.shape)
    for s in states:
        P = np.asarray(s.P.values)
        keep &= ~s.node_mask & (P >= floor * float(P.max()))
    return keep


def make_report(name: str, residual: np.ndarray, keep: np.ndarray, grid,
                threshold: float, dt: float | None = None, **extra) -> DiagnosticReport:
    r = np.where(keep, residual, 0.0)
    l_inf = float(np.max(np.abs(r))) if keep.any() else 0.0
    l2 = float(np.sqrt(integrate(grid, r * r)))
    meta = {"n": list(grid.n), "spacing": list(grid.spacing), "dt": dt,
            "evaluated_points": int(keep.sum())}
    return DiagnosticReport(name, l_inf, l2, float(threshold), l_inf < threshold, meta, extra)


# ---------------------------------------------------------------------------
# shared discrete pieces
# ---------------------------------------------------------------------------

def phase_laplacian(S: ScalarField, hbar: float) -> np.ndarray:
    """Compact second differences of S with each step wrapped modulo 2*pi*hbar."""
    grid = S.grid
    period = TWO_PI * hbar
    out = np.zeros(grid.shape)
    for ax in range(grid.dim):
        s = np.moveaxis(np.asarray(S.values), ax, 0)
        step = wrap_phase(np.diff(s, axis=0), period)
        d2 = np.zeros_like(s)
        d2[1:-1] = step[1:] - step[:-1]
        d2[0], d2[-1] = d2[1], d2[-2]
        out += np.moveaxis(d2, 0, ax) / grid.spacing[ax] ** 2
    return out


def _flow_terms(state: MadelungState):
    """(k_u . v, div v) at one time level, zero on the node mask."""
    consts = state.consts
    ku = ku_field(state.P)
    v = velocity_field(state, consts)
    kv = sum(a * b for a, b in zip(ku.components, v.components))
    div_v = phase_laplacian(state.S, consts.hbar) / consts.mass
    mask = state.node_mask | ku.mask
    return np.where(mask, 0.0, kv), np.where(mask, 0.0, div_v)


def _pair_terms(state0: MadelungState, state1: MadelungState, dt: float):
    P0 = np.asarray(state0.P.values)
    P1 = np.asarray(state1.P.values)
    P_mid = 0.5 * (P0 + P1)
    kv0, dv0 = _flow_terms(state0)
    kv1, dv1 = _flow_terms(state1)
    dPdt = (P1 - P0) / dt
    return P0, P1, P_mid, (kv0, dv0), (kv1, dv1), dPdt


def continuity_field(state0: MadelungState, state1: MadelungState, dt: float) -> np.ndarray:
    """dP/dt + div(P grad S / m), centred at t + dt/2.

    The divergence is expanded by the product rule, ``grad P . v + P div v``,
    with ``grad P = 2 P k_u``, and averaged over the two time levels.
    """
    P0, P1, _, (kv0, dv0), (kv1, dv1), dPdt = _pair_terms(state0, state1, dt)
    flux0 = 2.0 * P0 * kv0 + P0 * dv0
    flux1 = 2.0 * P1 * kv1 + P1 * dv1
    return dPdt + 0.5 * (flux0 + flux1)


def continuity_residual(state0: MadelungState, state1: MadelungState, dt: float,
                        threshold: float = 1e-2, floor: float = DEFAULT_FLOOR) -> DiagnosticReport:
    r = continuity_field(state0, state1, dt)
    keep = evaluation_mask((state0, state1), floor)
    return make_report("continuity", r, keep, state0.grid, threshold, dt)


def hjb_field(state: MadelungState, S_dot: ScalarField, V,
              consts: PhysicsConstants | None = None) -> np.ndarray:
    """dS/dt + |grad S|^2/2m + V + Q at one time level."""
    consts = consts or state.consts
    grad_S = phase_gradient(state.S, consts.hbar).components
    kinetic = sum(g * g for g in grad_S) / (2.0 * consts.mass)
    Q = np.asarray(quantum_potential(state.P, consts, check=False).values)
    return np.asarray(as_values(S_dot, state.grid)) + kinetic + as_values(V, state.grid) + Q


def hjb_residual(state: MadelungState, S_dot: ScalarField, V,
                 consts: PhysicsConstants | None = None, threshold: float = 1e-2,
                 floor: float = DEFAULT_FLOOR) -> DiagnosticReport:
    r = hjb_field(state, S_dot, V, consts)
    keep = evaluation_mask((state,), floor)
    if S_dot.mask is not None:
        keep &= ~S_dot.mask
    return make_report("hjb", r, keep, state.grid, threshold)


def resolved_phase_mask(V, grid, dt: float, hbar: float) -> np.ndarray:
    """Points (and their stencil neighbours) where the potential turns the
    phase by less than pi/2 per step, so dS/dt is recoverable from two levels."""
    fast = np.abs(as_values(V, grid)) * abs(dt) / hbar > 0.5 * np.pi
    return ~ndimage.binary_dilation(fast, iterations=1) if fast.any() else ~fast


def hjb_residual_pair(state0: MadelungState, state1: MadelungState, dt: float, V,
                      threshold: float = 1e-2, floor: float = DEFAULT_FLOOR) -> DiagnosticReport:
    """Time-centred HJB residual: wrapped (S1 - S0)/dt with the other terms
    averaged over both levels.

    Points where ``|V| dt / hbar > pi/2`` (e.g. inside a hard barrier) are
    excluded along with their neighbours: the phase change per step aliases
    there.
    """
    hbar = state0.consts.hbar
    grid = state0.grid
    dS = wrap_phase(np.asarray(state1.S.values) - np.asarray(state0.S.values), TWO_PI * hbar)
    zero = ScalarField(grid, np.zeros(grid.shape))
    r = dS / dt + 0.5 * (hjb_field(state0, zero, V) + hjb_field(state1, zero, V))
    resolved = resolved_phase_mask(V, grid, dt, hbar)
    keep = evaluation_mask((state0, state1), floor) & resolved
    return make_report("hjb", r, keep, grid, threshold, dt,
                       excluded_fast_phase=int((~resolved).sum()))


def orthogonality_index(state: MadelungState, consts: PhysicsConstants | None = None) -> float:
    """Weighted alignment of k_u and v, in [0, 1].

    0 means k_u is orthogonal to v everywhere (classical flow); 1 means they
    are parallel or antiparallel wherever both are nonzero.
    """
    consts = consts or state.consts
    ku = ku_field(state.P)
    v = velocity_field(state, consts)
    mask = state.node_mask | ku.mask
    P = np.where(mask, 0.0, np.asarray(state.P.values))
    kv = np.abs(sum(a * b for a, b in zip(ku.components, v.components)))
    km = np.sqrt(sum(a * a for a in ku.components))
    vm = np.sqrt(sum(a * a for a in v.components))
    den = integrate(state.grid, P * km * vm)
    if den < ORTHO_FLOOR:
        return 0.0
    return float(min(1.0, integrate(state.grid, P * kv) / (den + ORTHO_EPS)))


def mean_energy(psi: WaveFunction, V) -> float:
    """<H> with the same discrete Hamiltonian as the steppers."""
    return energy(psi, V)


def zero_point_field(state0: MadelungState, state1: MadelungState, dt: float) -> np.ndarray:
    """``k_u.v + div(v)/2 + (dP/dt)/(2P)`` at t + dt/2; equals
    ``continuity_field / (2 P_mid)`` wherever ``P_mid > 0``."""
    P0, P1, P_mid, (kv0, dv0), (kv1, dv1), dPdt = _pair_terms(state0, state1, dt)
    safe = np.where(P_mid > 0, P_mid, 1.0)
    w0, w1 = P0 / safe, P1 / safe
    return 0.5 * (w0 * (kv0 + 0.5 * dv0) + w1 * (kv1 + 0.5 * dv1)) + dPdt / (2.0 * safe)


def zero_point_identity(state0: MadelungState, state1: MadelungState, dt: float,
                        V=0.0, psi: WaveFunction | None = None, threshold: float = 1e-2,
                        floor: float = DEFAULT_FLOOR) -> DiagnosticReport:
    """Residual of ``k_u.v + div(v)/2 + (dP/dt)/(2P)`` at t + dt/2.

    Each time level is weighted by ``P_level / P_mid`` so that the residual
    times ``2 P_mid`` reproduces :func:`continuity_field` exactly. Also
    reports ``E0_est = -hbar <k_u.v>_P``, the divergence form
    ``(hbar/2) <div v>_P`` and the reference ``d hbar omega / 2`` with the
    heuristic ``omega = <E>/hbar`` (needs ``psi``).
    """
    consts = state0.consts
    grid = state0.grid
    r = zero_point_field(state0, state1, dt)
    P0 = np.asarray(state0.P.values)
    kv0, dv0 = _flow_terms(state0)
    keep = evaluation_mask((state0, state1), floor)
    norm = integrate(grid, P0)
    e0_kv = -consts.hbar * integrate(grid, P0 * kv0) / norm
    e0_div = 0.5 * consts.hbar * integrate(grid, P0 * dv0) / norm
    extra = {"E0_est": e0_kv, "E0_divergence_form": e0_div}
    if psi is not None:
        energy = mean_energy(psi, V)
        omega = energy / consts.hbar
        extra.update({"mean_energy": energy, "omega": omega,
                      "E0_reference": grid.dim * consts.hbar * omega / 2.0,
                      "omega_source": "mean energy / hbar (heuristic)"})
    return make_report("zero_point", r, keep, grid, threshold, dt, **extra)


def stationary_balance(state: MadelungState) -> np.ndarray:
    """``k_u.v + div(v)/2`` at one time level; zero for stationary states."""
    kv, dv = _flow_terms(state)
    return kv + 0.5 * dv


# ---------------------------------------------------------------------------
# relativistic variable mass
# ---------------------------------------------------------------------------

def box_amplitude(R_prev: np.ndarray, R: np.ndarray, R_next: np.ndarray, grid, dt: float,
                  c: float) -> np.ndarray:
    """(1/c^2) d2R/dt2 - lap R from three time levels."""
    d2t = (np.asarray(R_next) - 2.0 * np.asarray(R) + np.asarray(R_prev)) / (dt * dt)
    return d2t / (c * c) - laplacian_array(grid, np.asarray(R))


def variable_mass_field(P_prev: ScalarField, P: ScalarField, P_next: ScalarField, dt: float,
                        consts: PhysicsConstants | None = None,
                        eps_node: float | None = None) -> ScalarField:
    """``M^2 c^2 = m^2 c^2 + hbar^2 box(sqrt P) / sqrt P`` at the middle level.

    Returns M^2 c^2 (it may be negative); masked where P is below the node
    threshold. Pass the same field three times for a static profile.
    """
    consts = consts or PhysicsConstants()
    Pm = np.asarray(P.values)
    if eps_node is None:
        eps_node = NODE_EPS * float(Pm.max())
    mask = Pm < eps_node
    R = np.sqrt(Pm)
    box = box_amplitude(np.sqrt(np.asarray(P_prev.values)), R,
                        np.sqrt(np.asarray(P_next.values)), P.grid, dt, consts.c)
    safe = np.where(mask, 1.0, R)
    m2c2 = (consts.mass * consts.c) ** 2 + consts.hbar ** 2 * box / safe
    return ScalarField(P.grid, np.where(mask, 0.0, m2c2), mask)


def variable_mass(m2c2: ScalarField, c: float = 1.0) -> np.ndarray:
    """M from M^2 c^2; NaN where M^2 < 0 or masked."""
    vals = np.asarray(m2c2.values)
    bad = vals < 0 if m2c2.mask is None else (vals < 0) | m2c2.mask
    return np.where(bad, np.nan, np.sqrt(np.where(bad, 0.0, vals)) / c)
