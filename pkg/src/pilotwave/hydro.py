"""Hydrodynamic fields derived from a Madelung state.

Velocity, wavefront speed, the Huygens wave number ``k_u = grad(R)/R``,
the fluctuation magnitude ``hbar |k_u|``, the quantum potential and the
action-integrand / rms-fluctuation functionals.

Amplitude derivatives are taken on ``R = sqrt(P)`` and pushed to ``P`` by the
chain rule (``grad P = 2 R grad R``, ``lap P = 2 R lap R + 2 |grad R|^2``),
so the P-form and R-form of each quantity agree to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import (
    MadelungState,
    WaveFunction,
    PhysicsConstants,
    ScalarField,
    VectorField,
    gradient_array,
    integrate,
    laplacian_array,
    phase_gradient,
    wrap_phase,
    TWO_PI,
)

#: proportionality between |grad(delta S)| and hbar |grad P / P|
ALPHA = 0.5

NODE_EPS = 1e-12


def density_mask(P: ScalarField, eps_node: float | None = None) -> np.ndarray:
    values = np.asarray(P.values)
    if eps_node is None:
        eps_node = NODE_EPS * float(values.max())
    mask = values < eps_node
    if P.mask is not None:
        mask = mask | P.mask
    return mask


def _amplitude_derivatives(P: ScalarField, eps_node: float | None):
    mask = density_mask(P, eps_node)
    R = np.sqrt(np.asarray(P.values))
    grad_R = gradient_array(P.grid, R)
    lap_R = laplacian_array(P.grid, R)
    safe_R = np.where(mask, 1.0, R)
    return mask, R, safe_R, grad_R, lap_R


def relative_gradient(P: ScalarField, eps_node: float | None = None) -> VectorField:
    """grad(P)/P, zero (and masked) where P is below the node threshold."""
    mask, R, safe_R, grad_R, _ = _amplitude_derivatives(P, eps_node)
    comps = tuple(np.where(mask, 0.0, 2.0 * R * g / (safe_R * safe_R)) for g in grad_R)
    return VectorField(P.grid, comps, mask)


def ku_field(P: ScalarField, eps_node: float | None = None) -> VectorField:
    """Huygens wave number ``k_u = ALPHA * grad(P)/P`` (= grad(R)/R)."""
    return relative_gradient(P, eps_node).scaled(ALPHA)


def ku_from_amplitude(P: ScalarField, eps_node: float | None = None) -> VectorField:
    mask, _, safe_R, grad_R, _ = _amplitude_derivatives(P, eps_node)
    comps = tuple(np.where(mask, 0.0, g / safe_R) for g in grad_R)
    return VectorField(P.grid, comps, mask)


def fluctuation_magnitude(P: ScalarField, consts: PhysicsConstants | None = None,
                          eps_node: float | None = None) -> ScalarField:
    """|delta p| = hbar |k_u| = (hbar/2) |grad P / P|."""
    consts = consts or PhysicsConstants()
    ku = ku_field(P, eps_node)
    return ScalarField(P.grid, consts.hbar * np.asarray(ku.magnitude().values), ku.mask)


def quantum_potential(P: ScalarField, consts: PhysicsConstants | None = None,
                      eps_node: float | None = None, check: bool = True) -> ScalarField:
    """Q = (hbar^2/4m) [ (1/2)(grad P/P)^2 - lap P / P ], masked at nodes.

    With ``check`` the result is compared against ``-(hbar^2/2m) lap R / R``
    and an ``ArithmeticError`` is raised on disagreement beyond 1e-8.
    """
    consts = consts or PhysicsConstants()
    mask, R, safe_R, grad_R, lap_R = _amplitude_derivatives(P, eps_node)
    grad_R2 = sum(g * g for g in grad_R)
    grad_P2 = 4.0 * R * R * grad_R2
    lap_P = 2.0 * R * lap_R + 2.0 * grad_R2
    Pv = safe_R * safe_R
    pref = consts.hbar ** 2 / (4.0 * consts.mass)
    Q = pref * (0.5 * grad_P2 / (Pv * Pv) - lap_P / Pv)
    Q = np.where(mask, 0.0, Q)
    if check:
        Q_amp = np.where(mask, 0.0, -(consts.hbar ** 2 / (2.0 * consts.mass)) * lap_R / safe_R)
        scale = pref * (2.0 * grad_R2 / (safe_R * safe_R) + 2.0 * np.abs(lap_R) / safe_R)
        bad = np.abs(Q - Q_amp) > 1e-8 * np.maximum(scale, np.abs(Q_amp)) + 1e-300
        if np.any(bad & ~mask):
            raise ArithmeticError("quantum potential P-form and R-form disagree")
    return ScalarField(P.grid, Q, mask)


def velocity_field(state: MadelungState, consts: PhysicsConstants | None = None) -> VectorField:
    """v = grad(S)/m off the node mask (zero and masked on it)."""
    consts = consts or state.consts
    grad_S = phase_gradient(state.S, consts.hbar)
    mask = state.node_mask
    comps = tuple(np.where(mask, 0.0, g / consts.mass) for g in grad_S.components)
    return VectorField(state.grid, comps, mask)


def velocity_from_wavefunction(psi: WaveFunction, eps_node: float | None = None) -> VectorField:
    """Same field as ``velocity_field(decompose(psi))`` without unwrapping.

    Phase differences are wrapped before differencing, so the raw angle gives
    the same gradient as the unwrapped phase.
    """
    consts = psi.consts
    P = psi.density
    if eps_node is None:
        eps_node = NODE_EPS * float(P.max())
    mask = P < eps_node
    S = ScalarField(psi.grid, consts.hbar * np.angle(np.asarray(psi.values)), mask)
    grad_S = phase_gradient(S, consts.hbar)
    comps = tuple(np.where(mask, 0.0, g / consts.mass) for g in grad_S.components)
    return VectorField(psi.grid, comps, mask)


def time_derivative_S(state0: MadelungState, state1: MadelungState, dt: float) -> ScalarField:
    """Forward difference (S1 - S0)/dt with the difference wrapped modulo 2*pi*hbar."""
    hbar = state0.consts.hbar
    dS = wrap_phase(np.asarray(state1.S.values) - np.asarray(state0.S.values), TWO_PI * hbar)
    mask = state0.node_mask | state1.node_mask
    return ScalarField(state0.grid, np.where(mask, 0.0, dS / dt), mask)


def wavefront_speed(state0: MadelungState, state1: MadelungState, dt: float,
                    eps_grad: float = 1e-9) -> ScalarField:
    """u = -(dS/dt)/|grad S|; masked where |grad S| < eps_grad or at nodes.

    The gradient is the average over the two time levels.
    """
    hbar = state0.consts.hbar
    S_dot = time_derivative_S(state0, state1, dt)
    g0 = phase_gradient(state0.S, hbar).components
    g1 = phase_gradient(state1.S, hbar).components
    grad_mag = np.sqrt(sum((0.5 * (a + b)) ** 2 for a, b in zip(g0, g1)))
    mask = S_dot.mask | (grad_mag < eps_grad)
    u = np.where(mask, 0.0, -np.asarray(S_dot.values) / np.where(mask, 1.0, grad_mag))
    return ScalarField(state0.grid, u, mask)


def rms_fluctuation(P: ScalarField, consts: PhysicsConstants | None = None,
                    eps_node: float | None = None) -> float:
    """Mean-square fluctuation momentum: integral of P (hbar/2 |grad P/P|)^2."""
    consts = consts or PhysicsConstants()
    rel = relative_gradient(P, eps_node)
    integrand = np.asarray(P.values) * (0.5 * consts.hbar) ** 2 * sum(c * c for c in rel.components)
    return integrate(P.grid, np.where(rel.mask, 0.0, integrand))


def action_integrand(state: MadelungState, S_dot: ScalarField, V,
                     consts: PhysicsConstants | None = None, quantum: bool = True) -> ScalarField:
    """P [dS/dt + (grad S)^2/2m + (hbar^2/8m)(grad P/P)^2 + V].

    ``quantum=False`` drops the hbar^2 term, leaving the classical
    Hamilton-Jacobi integrand.
    """
    consts = consts or state.consts
    grid = state.grid
    Vv = np.asarray(V.values) if isinstance(V, ScalarField) else np.broadcast_to(V, grid.shape)
    grad_S = phase_gradient(state.S, consts.hbar).components
    kinetic = sum(g * g for g in grad_S) / (2.0 * consts.mass)
    body = np.asarray(S_dot.values) + kinetic + Vv
    mask = state.node_mask | (S_dot.mask if S_dot.mask is not None else False)
    if quantum:
        rel = relative_gradient(state.P)
        body = body + consts.hbar ** 2 / (8.0 * consts.mass) * sum(c * c for c in rel.components)
        mask = mask | rel.mask
    L = np.where(mask, 0.0, np.asarray(state.P.values) * body)
    return ScalarField(grid, L, mask)


@dataclass(frozen=True)
class HydroFields:
    v: VectorField
    u: ScalarField
    k_u: VectorField
    dp_mag: ScalarField
    Q: ScalarField
    node_mask: np.ndarray


def hydro_fields(state0: MadelungState, state1: MadelungState, dt: float) -> HydroFields:
    """All derived fields at the first of two consecutive states."""
    consts = state0.consts
    ku = ku_field(state0.P)
    mask = state0.node_mask | ku.mask
    return HydroFields(
        v=velocity_field(state0),
        u=wavefront_speed(state0, state1, dt),
        k_u=ku,
        dp_mag=fluctuation_magnitude(state0.P, consts),
        Q=quantum_potential(state0.P, consts),
        node_mask=mask,
    )
