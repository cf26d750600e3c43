"""Momentum-fluctuation model and its ensemble identities.

A fluctuation at position x is ``delta_p = n * hbar * |k_u(x)|`` with a
random unit direction ``n``: +-1 with equal weight in 1D, a uniform angle in
2D. Draws are uncorrelated across samples. Fluctuations are statistical only
and never feed back into the evolution.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from .fields import (
    MadelungState,
    PhysicsConstants,
    ScalarField,
    as_values,
    integrate,
    normalize,
    phase_gradient,
)
from .hydro import action_integrand, ku_field, rms_fluctuation
from .rng import CounterRNG, as_rng

#: a sampler maps (rng, k_u at the sample points, shape (N, dim)) to unit vectors
DirectionSampler = Callable[[CounterRNG, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class FluctuationSample:
    position: np.ndarray
    delta_p: np.ndarray
    n_unit: np.ndarray


@dataclass
class StatReport:
    """Monte-Carlo estimate against an oracle value."""

    quantity: str
    estimate: float
    stderr: float
    oracle: float
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"quantity": self.quantity, "estimate": self.estimate, "stderr": self.stderr,
               "oracle": self.oracle, "pass": bool(self.passed)}
        out.update(self.details)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


# ---------------------------------------------------------------------------
# direction models
# ---------------------------------------------------------------------------

def isotropic_directions(rng: CounterRNG, k_u: np.ndarray) -> np.ndarray:
    """Uniform random unit vectors, one per row of ``k_u``."""
    n, dim = k_u.shape
    u = rng.per_item(n, 1)[:, 0]
    if dim == 1:
        return np.where(u < 0.5, -1.0, 1.0)[:, None]
    if dim == 2:
        phi = 2.0 * np.pi * u
        return np.stack([np.cos(phi), np.sin(phi)], axis=1)
    raise ValueError("only 1D and 2D are supported")


def fixed_direction(direction) -> DirectionSampler:
    """Deterministic direction, used as a biased negative control."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)

    def sampler(rng: CounterRNG, k_u: np.ndarray) -> np.ndarray:
        return np.broadcast_to(d, k_u.shape).copy()

    return sampler


def aligned_directions(rng: CounterRNG, k_u: np.ndarray) -> np.ndarray:
    """n along k_u (a second biased negative control)."""
    mag = np.linalg.norm(k_u, axis=1, keepdims=True)
    return np.where(mag > 0, k_u / np.where(mag > 0, mag, 1.0), 0.0)


# ---------------------------------------------------------------------------
# point evaluation
# ---------------------------------------------------------------------------

def _index_coords(grid, points: np.ndarray) -> np.ndarray:
    return np.stack([(points[:, a] - grid.lo[a]) / grid.spacing[a] for a in range(grid.dim)])


def interpolate(grid, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of grid values at ``points`` (shape (N, dim))."""
    return ndimage.map_coordinates(np.asarray(values, dtype=float), _index_coords(grid, points),
                                   order=1, mode="nearest", prefilter=False)


def _touches_mask(grid, mask: np.ndarray, points: np.ndarray) -> np.ndarray:
    """True where any corner of the enclosing cell is masked."""
    idx = _index_coords(grid, points)
    out = np.zeros(points.shape[0], dtype=bool)
    lo = [np.clip(np.floor(c).astype(np.intp), 0, n - 1) for c, n in zip(idx, grid.n)]
    for corner in np.ndindex(*(2,) * grid.dim):
        sel = tuple(np.clip(l + o, 0, n - 1) for l, o, n in zip(lo, corner, grid.n))
        out |= mask[sel]
    return out


def _positions(points, dim: int) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 0 or (pts.ndim == 1 and dim == 1):
        pts = pts.reshape(-1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(1, dim)
    return pts


def sample_fluctuations(P: ScalarField, points, rng, hbar: float = 1.0,
                        sampler: DirectionSampler | None = None,
                        eps_node: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised draw: returns ``(delta_p, n_unit)``, each of shape (N, dim).

    Raises ``ValueError`` if a point lies on the node mask.
    """
    grid = P.grid
    pts = _positions(points, grid.dim)
    ku = ku_field(P, eps_node)
    if np.any(_touches_mask(grid, ku.mask, pts)):
        raise ValueError("sample position lies on the node mask")
    k = np.stack([interpolate(grid, c, pts) for c in ku.components], axis=1)
    n_unit = (sampler or isotropic_directions)(as_rng(rng).split("fluctuation-directions"), k)
    mag = hbar * np.linalg.norm(k, axis=1, keepdims=True)
    return n_unit * mag, n_unit


def sample_fluctuation(P: ScalarField, x, rng, hbar: float = 1.0,
                       sampler: DirectionSampler | None = None) -> FluctuationSample:
    """One fluctuation ``n * hbar |k_u(x)|`` at position ``x``."""
    pts = _positions(x, P.grid.dim)
    if pts.shape[0] != 1:
        raise ValueError("expected a single position")
    dp, n = sample_fluctuations(P, pts, rng, hbar, sampler)
    return FluctuationSample(pts[0], dp[0], n[0])


def _draw_positions(P: ScalarField, n: int, rng: CounterRNG) -> np.ndarray:
    from .trajectories import sample_initial_positions
    return sample_initial_positions(P, n, rng.split("positions"))


# ---------------------------------------------------------------------------
# ensemble identities
# ---------------------------------------------------------------------------

def isotropy_report(dim: int, n_samples: int, seed,
                    sampler: DirectionSampler | None = None) -> StatReport:
    """Per-component mean of n against the bound 4/sqrt(n_samples)."""
    rng = as_rng(seed).split("isotropy")
    n = (sampler or isotropic_directions)(rng, np.ones((n_samples, dim)))
    means = n.mean(axis=0)
    worst = float(np.max(np.abs(means)))
    bound = float(4.0 / np.sqrt(n_samples))
    return StatReport("isotropy", worst, float(1.0 / np.sqrt(n_samples)), 0.0, worst < bound,
                      {"component_means": means.tolist(), "bound": bound})


def verify_unbiasedness(P: ScalarField, S: ScalarField, n_samples: int, seed,
                        hbar: float = 1.0, sampler: DirectionSampler | None = None) -> StatReport:
    """Monte-Carlo estimate of the integral of P grad(S).delta_p.

    Positions are drawn from P (normalised here), so the sample mean of
    grad(S).delta_p estimates the integral. Passes when
    ``|estimate| <= 3 * stderr``.
    """
    P = normalize(P)
    grid = P.grid
    rng = as_rng(seed).split("unbiasedness")
    pts = _draw_positions(P, n_samples, rng)
    grad_S = phase_gradient(S, hbar).components
    g = np.stack([interpolate(grid, c, pts) for c in grad_S], axis=1)
    dp, _ = sample_fluctuations(P, pts, rng, hbar, sampler)
    terms = np.sum(g * dp, axis=1)
    est = float(terms.mean())
    se = float(terms.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return StatReport("unbiasedness", est, se, 0.0, abs(est) <= 3.0 * se,
                      {"n_samples": n_samples, "criterion": "|estimate| <= 3 stderr"})


def verify_rms(P: ScalarField, n_samples: int, seed, hbar: float = 1.0,
               tolerance: float = 0.02) -> StatReport:
    """Monte-Carlo mean of |delta_p|^2 against its quadrature value.

    P is normalised first. The reported discrepancy is relative to the
    quadrature value (absolute when that value is zero).
    """
    P = normalize(P)
    rng = as_rng(seed).split("rms")
    quad = rms_fluctuation(P, PhysicsConstants(hbar=hbar))
    pts = _draw_positions(P, n_samples, rng)
    dp, _ = sample_fluctuations(P, pts, rng, hbar)
    sq = np.sum(dp * dp, axis=1)
    est = float(sq.mean())
    se = float(sq.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    disc = abs(est - quad) / quad if quad > 0 else abs(est - quad)
    return StatReport("rms_fluctuation", est, se, quad, disc < tolerance,
                      {"discrepancy": disc, "tolerance": tolerance, "n_samples": n_samples})


def verify_action_split(state: MadelungState, S_dot: ScalarField, V, n_samples: int, seed,
                        sampler: DirectionSampler | None = None) -> StatReport:
    """Action with fluctuations equals classical action plus the rms term.

    The Monte-Carlo mean of ``dS/dt + |grad S + delta_p|^2/2m + V`` over
    positions drawn from P is compared with the quadrature classical integral
    plus ``<|delta_p|^2>/2m``. Passes within three standard errors plus the
    interpolation error of the classical part.
    """
    consts = state.consts
    grid = state.grid
    if abs(integrate(grid, np.asarray(state.P.values)) - 1.0) > 1e-6:
        raise ValueError("action split needs a normalised density")
    rng = as_rng(seed).split("action-split")
    pts = _draw_positions(state.P, n_samples, rng)
    grad_S = phase_gradient(state.S, consts.hbar).components
    g = np.stack([interpolate(grid, c, pts) for c in grad_S], axis=1)
    dp, _ = sample_fluctuations(state.P, pts, rng, consts.hbar, sampler)
    Vv = as_values(V, grid)
    base = interpolate(grid, np.asarray(S_dot.values) + Vv, pts)
    with_fluct = base + np.sum((g + dp) ** 2, axis=1) / (2.0 * consts.mass)
    without = base + np.sum(g * g, axis=1) / (2.0 * consts.mass)
    est = float(with_fluct.mean())
    # the classical part cancels sample by sample in the difference
    diff = with_fluct - without
    se = float(diff.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    classical = integrate(grid, np.asarray(action_integrand(state, S_dot, V, consts,
                                                            quantum=False).values))
    rms = rms_fluctuation(state.P, consts)
    oracle = classical + rms / (2.0 * consts.mass)
    shift = float(diff.mean())
    target = rms / (2.0 * consts.mass)
    passed = abs(shift - target) <= 3.0 * se + 0.02 * abs(target)
    return StatReport("action_split", est, se, oracle, passed,
                      {"fluctuation_shift": shift, "rms_over_2m": target,
                       "classical_quadrature": classical,
                       "classical_monte_carlo": float(without.mean())})
