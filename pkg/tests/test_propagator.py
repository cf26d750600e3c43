import numpy as np
import pytest

from pilotwave.fields import Grid, PhysicsConstants, WaveFunction, integrate
from pilotwave.propagator import (
    CrankNicolson1D,
    PeacemanRachford2D,
    Potential,
    SlitGeometry,
    energy,
    evolve,
    make_stepper,
    step_adi_2d,
    step_cn_1d,
)
from pilotwave.scenario import InitialSpec, initial_state, parse_scenario

from conftest import free_gaussian_exact, gaussian_psi


def _ground(grid, omega=1.0):
    return initial_state(grid, InitialSpec("harmonic_ground", omega=omega), PhysicsConstants())


def test_cn_norm_per_step():
    g = Grid.line(801, -20, 20)
    psi = gaussian_psi(g, k0=2.0)
    stepper = CrankNicolson1D(g, Potential.harmonic(0.3), 0.01)
    v = np.asarray(psi.values)
    n0 = psi.norm()
    worst = 0.0
    for _ in range(200):
        v1 = stepper.step_values(v)
        n1 = integrate(g, np.abs(v1) ** 2)
        worst = max(worst, abs(n1 - n0) / n0)
        v, n0 = v1, n1
    assert worst < 1e-12


def test_cn_harmonic_ground_stationary():
    g = Grid.line(801, -10, 10)
    psi0 = _ground(g)
    V = Potential.harmonic(1.0)
    stepper = make_stepper(g, V, 1e-3)
    v = np.asarray(psi0.values)
    for _ in range(1000):
        v = stepper.step_values(v)
    assert np.max(np.abs(np.abs(v) ** 2 - psi0.density)) < 1e-6


def test_cn_free_gaussian_width():
    g = Grid.line(801, -20, 20)
    x = g.axes[0]
    stepper = make_stepper(g, Potential.free(), 1e-3)
    v = np.asarray(gaussian_psi(g).values)
    for _ in range(2000):
        v = stepper.step_values(v)
    P = np.abs(v) ** 2
    sigma = np.sqrt(integrate(g, x * x * P) / integrate(g, P))
    assert abs(sigma / np.sqrt(2.0) - 1) < 1e-3


def test_cn_box_eigenmode_stationary():
    g = Grid.line(201, 0.0, 1.0)
    x = g.axes[0]
    psi = WaveFunction(g, np.sin(np.pi * x))
    P0 = np.abs(psi.values)
    for _ in range(100):
        psi = step_cn_1d(psi, Potential.free(), 1e-4)
    assert np.max(np.abs(np.abs(psi.values) - P0)) < 1e-8


def test_adi_harmonic_ground_2d():
    g = Grid.plane(121, -6, 6, 121, -6, 6)
    psi0 = initial_state(g, InitialSpec("harmonic_ground", omega=1.0), PhysicsConstants())
    stepper = make_stepper(g, Potential.harmonic(1.0), 1e-3)
    v = np.asarray(psi0.values)
    for _ in range(500):
        v = stepper.step_values(v)
    assert np.max(np.abs(np.abs(v) ** 2 - psi0.density)) < 1e-5


def test_adi_separable_matches_1d():
    gx = Grid.line(101, -8, 8)
    gy = Grid.line(81, -6, 6)
    g = Grid.plane(101, -8, 8, 81, -6, 6)
    ax = np.asarray(gaussian_psi(gx, k0=1.0).values)
    ay = np.asarray(gaussian_psi(gy, sigma=0.8).values)
    psi2 = WaveFunction(g, np.outer(ax, ay))
    s1x, s1y = make_stepper(gx, Potential.free(), 0.01), make_stepper(gy, Potential.free(), 0.01)
    s2 = make_stepper(g, Potential.free(), 0.01)
    v2 = np.asarray(psi2.values)
    for _ in range(100):
        ax, ay, v2 = s1x.step_values(ax), s1y.step_values(ay), s2.step_values(v2)
    assert np.max(np.abs(v2 - np.outer(ax, ay))) < 1e-8


def test_adi_norm_1000_steps():
    g = Grid.plane(81, -10, 10, 81, -10, 10)
    sc = parse_scenario("""
[grid]
dim = 2
n = 81
x_min = -10
x_max = 10
[time]
dt = 0.01
n_steps = 1000
snapshot_stride = 1000
[initial]
kind = gaussian
sigma = 1.5
kx = 1.0
[potential]
kind = harmonic
omega = 0.2
""")
    res = evolve(sc, keep_snapshots=False)
    assert abs(1 - res.norm_history[-1] / res.norm_history[0]) < 1e-8
    assert g == sc.grid


def test_adi_step_function_form():
    g = Grid.plane(65, -8, 8, 65, -8, 8)
    X, Y = g.mesh()
    psi = WaveFunction(g, np.exp(-(X ** 2 + Y ** 2) / 2)).normalized()
    out = step_adi_2d(psi, Potential.free(), 0.01)
    assert abs(out.norm() - 1) < 1e-12
    assert isinstance(make_stepper(g, Potential.free(), 0.01), PeacemanRachford2D)


SLIT_BOX = Grid.plane(81, 0, 20, 64, -8, 8)


def _slit_stepper(dt=0.02):
    slits = SlitGeometry(8.0, 0.5, (-2.0, 2.0), 1.0, 500.0)
    return make_stepper(SLIT_BOX, Potential.barrier(slits), dt)


def _packet_2d():
    X, Y = SLIT_BOX.mesh()
    psi = np.exp(-((X - 5) ** 2 + Y ** 2) / 4 + 2j * X)
    psi[[0, -1], :] = 0
    psi[:, [0, -1]] = 0
    return WaveFunction(SLIT_BOX, psi).normalized()


def test_adi_barrier_norm_exact():
    stepper = _slit_stepper()
    assert not stepper.separable
    v = np.asarray(_packet_2d().values)
    n0 = integrate(SLIT_BOX, np.abs(v) ** 2)
    for _ in range(300):
        v = stepper.step_values(v)
    assert abs(integrate(SLIT_BOX, np.abs(v) ** 2) / n0 - 1) < 1e-12


def test_adi_barrier_time_reversible():
    fwd, back = _slit_stepper(0.02), _slit_stepper(-0.02)
    v0 = np.asarray(_packet_2d().values)
    v = v0
    for _ in range(40):
        v = fwd.step_values(v)
    for _ in range(40):
        v = back.step_values(v)
    assert np.max(np.abs(v - v0)) < 1e-9


@pytest.mark.parametrize("potential", [Potential.free(), Potential.harmonic(0.5, (10.0, 0.0)),
                                       "barrier"])
def test_step_flux_closes_continuity(potential):
    stepper = _slit_stepper() if potential == "barrier" else make_stepper(SLIT_BOX, potential, 0.02)
    v = np.asarray(_packet_2d().values)
    for _ in range(60):
        v = stepper.step_values(v)
    new, (jx, jy) = stepper.step_flux(v)
    assert np.array_equal(new, stepper.step_values(v)) or not stepper.separable
    hx, hy = SLIT_BOX.spacing
    div = (np.diff(np.pad(jx, ((1, 1), (0, 0))), axis=0) / hx
           + np.diff(np.pad(jy, ((0, 0), (1, 1))), axis=1) / hy)
    rate = (np.abs(new) ** 2 - np.abs(v) ** 2) / 0.02
    assert np.max(np.abs(rate + div)) < 1e-12 * np.max(np.abs(rate))


def test_time_reversibility():
    g = Grid.line(401, -10, 10)
    psi = gaussian_psi(g, k0=1.5)
    V = Potential.harmonic(0.5)
    fwd, back = make_stepper(g, V, 0.01), make_stepper(g, V, -0.01)
    v = np.asarray(psi.values)
    for _ in range(50):
        v = fwd.step_values(v)
    for _ in range(50):
        v = back.step_values(v)
    assert np.max(np.abs(v - psi.values)) < 1e-9


def test_energy_conservation():
    g = Grid.line(801, -20, 20)
    V = Potential.harmonic(0.4)
    psi = gaussian_psi(g, k0=1.0, x0=-2.0)
    e0 = energy(psi, V)
    stepper = make_stepper(g, V, 0.005)
    v = np.asarray(psi.values)
    for _ in range(1000):
        v = stepper.step_values(v)
    e1 = energy(WaveFunction(g, v), V)
    assert abs(e1 - e0) / abs(e0) < 1e-6


def test_second_order_in_dt():
    g = Grid.line(401, -15, 15)
    psi = gaussian_psi(g, k0=1.0)
    T = 0.8

    def run(dt):
        s = make_stepper(g, Potential.harmonic(1.0), dt)
        v = np.asarray(psi.values)
        for _ in range(int(round(T / dt))):
            v = s.step_values(v)
        return v

    ref = run(0.1 / 16)
    e1 = np.max(np.abs(run(0.1) - ref))
    e2 = np.max(np.abs(run(0.05) - ref))
    assert 3.0 < e1 / e2 < 5.0


def _scenario(n_steps, stride):
    return parse_scenario(f"""
[grid]
n = 101
x_min = -10
x_max = 10
[time]
dt = 0.01
n_steps = {n_steps}
snapshot_stride = {stride}
[initial]
kind = gaussian
""")


def test_evolve_zero_steps():
    res = evolve(_scenario(0, 1))
    assert len(res.snapshots) == 1
    assert np.array_equal(res.snapshots[0][1].values, res.final.values)
    assert res.previous is None


def test_evolve_schedule():
    res = evolve(_scenario(100, 10))
    assert len(res.snapshots) == 11
    assert np.all(np.diff(res.times) > 0)
    assert len(res.norm_history) == 101


def test_phase_cfl_warning():
    sc = parse_scenario("""
[grid]
n = 101
x_min = -10
x_max = 10
[time]
dt = 0.1
n_steps = 2
[initial]
kind = harmonic_ground
[potential]
kind = harmonic
omega = 1.0
""")
    res = evolve(sc)
    assert any("dt*max|V|/hbar" in w for w in res.warnings)


def test_slit_geometry_validation():
    with pytest.raises(ValueError, match="overlap"):
        SlitGeometry(0.0, 0.5, (-1.0, 0.5), 2.0, 10.0)
    line = Grid.line(64, 0, 1)
    with pytest.raises(ValueError, match="slits require 2D grid"):
        SlitGeometry(0.5, 0.1, (0.0,), 0.3, 1.0).validate(line)
    g = Grid.plane(64, 0, 10, 64, -5, 5)
    with pytest.raises(ValueError, match="must exceed 2\\*dy"):
        SlitGeometry(5.0, 0.5, (0.0,), 0.2, 1.0).validate(g)
    s = SlitGeometry(5.0, 0.5, (-2.0, 2.0), 1.0, 100.0)
    wall = s.wall_mask(g)
    V = Potential.barrier(s).evaluate(g).values
    assert V[wall].min() == 100.0 and V[~wall].max() == 0.0
    assert s.only(0).slit_centers == (-2.0,)


def test_double_slit_fringe_count():
    """The shipped geometry's final density shows at least five maxima on the screen."""
    from scipy.signal import find_peaks
    from pilotwave.scenario import shipped_scenario

    sc = shipped_scenario("doubleslit")
    res = evolve(sc, keep_snapshots=False)
    g = sc.grid
    i = int(np.argmin(np.abs(g.axes[0] - sc.trajectories.screen_x)))
    line = res.final.density[i]
    peaks, _ = find_peaks(line, prominence=0.05 * line.max())
    assert len(peaks) >= 5
