import numpy as np
import pytest
from scipy import stats

from pilotwave.fields import (
    Grid,
    PhysicsConstants,
    ScalarField,
    VectorField,
    WaveFunction,
    decompose,
)
from pilotwave.hydro import velocity_field
from pilotwave.propagator import Potential, make_stepper
from pilotwave.scenario import InitialSpec, initial_state
from pilotwave.trajectories import (
    ACTIVE,
    EXITED,
    NODE_STALLED,
    DotPattern,
    FluxGuide,
    Screen,
    TrajectoryEnsemble,
    accumulate_dots,
    classical_pattern,
    dot_image,
    integrate_trajectory,
    read_pgm,
    run_dot_experiment,
    sample_initial_positions,
    select_dots,
    write_pgm,
    write_staged_pgm,
)

from conftest import gaussian_psi


def _cell_probabilities(x, p, edges):
    """Exact bin masses of the piecewise-linear density through (x, p)."""
    cum = np.concatenate(([0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(x))))
    at = np.interp(edges, x, cum)
    return np.diff(at) / cum[-1]


def test_point_mass_sampling():
    g = Grid.line(101, 0, 1)
    P = np.zeros(101)
    P[40] = 1.0
    pts = sample_initial_positions(ScalarField(g, P), 1000, 3)[:, 0]
    assert np.all(np.abs(pts - 0.4) <= 0.01 + 1e-15)


def test_degenerate_density():
    g = Grid.line(16, 0, 1)
    with pytest.raises(ValueError):
        sample_initial_positions(ScalarField(g, np.zeros(16)), 10, 1)


def test_gaussian_moments():
    g = Grid.line(801, -20, 20)
    P = ScalarField(g, gaussian_psi(g).density)
    x = sample_initial_positions(P, 1_000_000, 2024)[:, 0]
    assert abs(x.mean()) < 0.005
    assert abs(x.var() - 1.0) < 0.01


@pytest.mark.parametrize("seed", [1, 99])
def test_sampling_chi_square_1d(seed):
    g = Grid.line(801, -20, 20)
    x = g.axes[0]
    p = gaussian_psi(g).density + 0.5 * gaussian_psi(g, sigma=0.5, x0=2.5).density
    pts = sample_initial_positions(ScalarField(g, p), 100_000, seed)[:, 0]
    edges = np.linspace(-3.5, 4.5, 51)
    probs = _cell_probabilities(x, p, edges)
    counts, _ = np.histogram(pts, edges)
    inside = probs.sum()
    expected = probs * 100_000
    # pool the tails into one extra bin
    tail_obs = 100_000 - counts.sum()
    tail_exp = (1 - inside) * 100_000
    chi2 = np.sum((counts - expected) ** 2 / expected) + (tail_obs - tail_exp) ** 2 / tail_exp
    lo, hi = stats.chi2.ppf([0.005, 0.995], df=50)
    assert lo <= chi2 <= hi


def test_sampling_2d_marginals_and_conditional():
    g = Grid.plane(121, -6, 6, 101, -5, 5)
    X, Y = g.mesh()
    P = np.exp(-X ** 2 / 2 - (Y - 0.5 * X) ** 2 / 0.5)
    pts = sample_initial_positions(ScalarField(g, P), 200_000, 5)
    cov = np.cov(pts.T)
    # exact moments of the continuous density: var x = 1, cov = 0.5, var y = 0.25 + 0.25
    assert cov[0, 0] == pytest.approx(1.0, rel=0.02)
    assert cov[0, 1] == pytest.approx(0.5, rel=0.03)
    assert cov[1, 1] == pytest.approx(0.5, rel=0.02)


def test_sampling_deterministic_and_order_free():
    g = Grid.plane(41, -3, 3, 41, -3, 3)
    X, Y = g.mesh()
    P = ScalarField(g, np.exp(-X ** 2 - Y ** 2))
    a = sample_initial_positions(P, 500, 77)
    assert np.array_equal(a, sample_initial_positions(P, 500, 77))
    assert np.array_equal(a[:100], sample_initial_positions(P, 100, 77))
    assert not np.array_equal(a, sample_initial_positions(P, 500, 78))


def test_uniform_velocity_exact():
    g = Grid.line(101, -10, 10)
    v = VectorField(g, (np.full(101, 0.7),))
    ens = integrate_trajectory([v, v, v], [0.0, 1.0, 2.0], [-3.0, 0.25], dt=0.1)
    assert np.max(np.abs(ens.positions[:, 0] - (np.array([-3.0, 0.25]) + 1.4))) < 1e-10
    g2 = Grid.plane(21, -5, 5, 21, -5, 5)
    v2 = VectorField(g2, (np.full(g2.shape, 0.3), np.full(g2.shape, -0.2)))
    e2 = integrate_trajectory([v2, v2], [0.0, 3.0], [[0.0, 0.0]], dt=0.5)
    assert np.max(np.abs(e2.positions[0] - [0.9, -0.6])) < 1e-10


def _evolved_snapshots(g, psi, V, dt, n_steps, stride):
    stepper = make_stepper(g, V, dt)
    v = np.asarray(psi.values)
    snaps, times = [psi], [0.0]
    for n in range(1, n_steps + 1):
        v = stepper.step_values(v)
        if n % stride == 0:
            snaps.append(WaveFunction(g, v))
            times.append(n * dt)
    return snaps, times


def _velocities(snaps):
    return [velocity_field(decompose(s)) for s in snaps]


def test_free_gaussian_bohmian_trajectory():
    g = Grid.line(801, -20, 20)
    snaps, times = _evolved_snapshots(g, gaussian_psi(g), Potential.free(), 0.002, 1000, 5)
    x0 = np.array([1.0, -0.5, 2.0])
    sigma_t = np.sqrt(1 + (times[-1] / 2) ** 2)
    ens = integrate_trajectory(_velocities(snaps), times, x0)
    assert np.max(np.abs(ens.positions[:, 0] - sigma_t * x0)) < 1e-3
    # the finite-volume guide is first order in h but still close
    flux = integrate_trajectory(snaps, times, x0)
    assert np.max(np.abs(flux.positions[:, 0] - sigma_t * x0)) < 5e-3


def test_harmonic_ground_state_trajectories_stationary():
    g = Grid.line(401, -10, 10)
    psi = initial_state(g, InitialSpec("harmonic_ground"), PhysicsConstants())
    snaps, times = _evolved_snapshots(g, psi, Potential.harmonic(1.0), 0.01, 200, 10)
    x0 = np.linspace(-2, 2, 9)
    ens = integrate_trajectory(snaps, times, x0)
    assert np.max(np.abs(ens.positions[:, 0] - x0)) < 1e-8


def test_non_crossing_1d():
    g = Grid.line(801, -20, 20)
    psi = WaveFunction(g, gaussian_psi(g, x0=-3, k0=1.5).values
                       + gaussian_psi(g, x0=3, k0=-1.5).values).normalized()
    snaps, times = _evolved_snapshots(g, psi, Potential.free(), 0.005, 800, 2)
    start = np.sort(sample_initial_positions(ScalarField(g, psi.density), 1000, 5)[:, 0])
    # velocity gradients are steep near the interference nodes; RK4 substeps
    # of dt/2 keep the integration error below the particle spacing there
    ens = integrate_trajectory(_velocities(snaps), times, start, dt=0.0025, record_paths=True)
    paths = ens.paths[:, :, 0]
    assert np.all(ens.status == ACTIVE)
    # ordering at every recorded time equals the initial ordering
    assert np.all(np.diff(paths, axis=1) >= 0)


def test_flux_transport_uniform_flow_exact():
    g = Grid.line(201, -10, 10)
    k, h = 1.3, g.spacing[0]
    guide = FluxGuide(WaveFunction(g, np.exp(1j * k * g.axes[0])))
    speed = np.sin(k * h) / h  # lattice group velocity of the link current
    start = np.array([[-4.0], [0.013], [2.5]])
    new, stalled, hit, _, _ = guide.transport(start, 2.0)
    assert not stalled.any() and not hit.any()
    assert np.max(np.abs(new - (start + 2.0 * speed))) < 1e-12


def test_flux_transport_screen_hit_analytic():
    g = Grid.plane(81, -4, 4, 41, -2, 2)
    X, _ = g.mesh()
    guide = FluxGuide(WaveFunction(g, np.exp(0.9j * X)))
    speed = np.sin(0.9 * 0.1) / 0.1
    start = np.array([[-1.0, 0.31], [1.2, -0.5]])
    new, stalled, hit, hit_pos, hit_dt = guide.transport(start, 3.0, Screen(0.5))
    assert hit.tolist() == [True, False]
    assert hit_pos[0] == pytest.approx([0.5, 0.31], abs=1e-12)
    assert hit_dt[0] == pytest.approx(1.5 / speed, rel=1e-12)
    assert new[1] == pytest.approx([1.2 + 3.0 * speed, -0.5], abs=1e-12)


def test_step_guide_carries_lattice_flux():
    # the discrete continuity equation of Crank-Nicolson holds exactly
    g = Grid.line(401, -10, 10)
    psi = gaussian_psi(g, k0=2.0)
    after = make_stepper(g, Potential.free(), 0.01).step(psi)
    guide = FluxGuide.from_step(psi, after)
    residual = (after.density - psi.density) / 0.01 + np.diff(guide.faces[0]) / g.spacing[0]
    assert np.max(np.abs(residual)) < 1e-12


def test_flux_transport_preserves_order_1d():
    g = Grid.line(801, -20, 20)
    psi = WaveFunction(g, gaussian_psi(g, x0=-3, k0=1.5).values
                       + gaussian_psi(g, x0=3, k0=-1.5).values).normalized()
    snaps, times = _evolved_snapshots(g, psi, Potential.free(), 0.005, 800, 1)
    start = np.sort(sample_initial_positions(ScalarField(g, psi.density), 1000, 5)[:, 0])
    ens = integrate_trajectory(snaps, times, start, record_paths=True)
    live = ens.status == ACTIVE
    paths = ens.paths[:, live, 0]
    assert live.sum() > 990
    assert np.all(np.diff(paths, axis=1) >= 0)


def test_flux_guide_masks_nodes():
    g = Grid.line(101, -1, 1)
    x = g.axes[0]
    psi = WaveFunction(g, x * np.exp(0.3j * x))
    guide = FluxGuide(psi)
    v = guide(np.array([[0.0], [0.5]]))
    assert np.isnan(v[0, 0]) and np.isfinite(v[1, 0])


def test_exit_status():
    g = Grid.line(101, 0, 1)
    v = VectorField(g, (np.ones(101),))
    ens = integrate_trajectory([v, v], [0.0, 0.6], [0.5, 0.2], dt=0.1)
    assert ens.status[0] == EXITED and ens.status[1] == ACTIVE


def _ensemble(coords, detected=None):
    n = len(coords)
    hits = np.column_stack([np.zeros(n), coords])
    det = np.ones(n, bool) if detected is None else np.asarray(detected)
    return TrajectoryEnsemble(1, hits.copy(), hits.copy(), np.full(n, EXITED, np.int8), det,
                              hits, np.zeros(n))


def test_accumulate_dots_basic():
    rng = np.random.default_rng(0)
    ens = _ensemble(rng.normal(size=8))
    pat = accumulate_dots(ens, Screen(0.0), 16, window=(-5, 5))
    assert pat.counts.sum() == 8 and pat.n_total == 8
    same = accumulate_dots(_ensemble(np.full(50, 0.3)), Screen(0.0), 10, window=(-1, 1))
    assert np.count_nonzero(same.counts) == 1 and same.counts.max() == 50


def test_accumulate_dots_window_and_limit():
    coords = np.array([0.1, 9.0, 0.2, -0.3, 8.0, 0.4])
    ens = _ensemble(coords)
    pat = accumulate_dots(ens, Screen(0.0), 4, limit=3, window=(-1, 1))
    assert pat.counts.sum() == 3
    assert pat.excluded == 1 and pat.n_total == 4
    idx, c, out = select_dots(ens, Screen(0.0), limit=3, window=(-1, 1))
    assert list(idx) == [0, 2, 3] and out == 1
    undetected = _ensemble(coords, detected=[True, False, True, True, True, True])
    assert select_dots(undetected, Screen(0.0))[0].tolist() == [0, 2, 3, 4, 5]


def test_accumulate_dots_1d_excludes_stalled():
    pos = np.array([[0.1], [0.2], [0.3]])
    ens = TrajectoryEnsemble(0, pos, pos, np.array([ACTIVE, NODE_STALLED, EXITED], np.int8),
                             np.zeros(3, bool), np.full((3, 1), np.nan), np.zeros(3))
    pat = accumulate_dots(ens, None, 5, grid=Grid.line(16, 0, 1))
    assert pat.counts.sum() == 2


def test_empty_ensemble():
    ens = TrajectoryEnsemble(0, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, np.int8),
                             np.zeros(0, bool), np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError, match="empty"):
        accumulate_dots(ens, Screen(1.0), 10)


def test_dot_pattern_invariant():
    with pytest.raises(ValueError):
        DotPattern("y", np.linspace(0, 1, 3), [1, 2], n_total=5)
    p = DotPattern("y", np.linspace(0, 1, 3), [1, 2], n_total=4, excluded=1)
    assert (p + p).n_total == 8


def test_pgm_roundtrip(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    path = write_pgm(tmp_path / "a.pgm", img)
    assert path.read_bytes().startswith(b"P5\n4 3\n255\n")
    assert np.array_equal(read_pgm(path), img)
    pats = [DotPattern("y", np.linspace(0, 1, 5), c, sum(c)) for c in ([0, 1, 2, 0], [4, 4, 0, 1])]
    staged = read_pgm(write_staged_pgm(tmp_path / "s.pgm", pats))
    assert staged.shape == (2, 4)
    assert staged[0].tolist() == [0, 128, 255, 0]
    assert staged[1].max() == 255 and staged[1, 2] == 0


def test_dot_image_counts():
    ens = _ensemble(np.linspace(-0.9, 0.9, 300))
    edges = np.linspace(-1, 1, 11)
    img = dot_image(ens, Screen(0.0), edges, height=16)
    assert img.shape == (16, 10) and img.max() == 255
    assert np.array_equal(img, dot_image(ens, Screen(0.0), edges, height=16))
    empty = dot_image(ens, Screen(0.0), edges, height=4, limit=0, window=(-1, 1))
    assert not empty.any()


def test_dot_experiment_deterministic(small_slits):
    a = run_dot_experiment(small_slits, n_particles=300)
    b = run_dot_experiment(small_slits, n_particles=300)
    assert np.array_equal(a.ensemble.hits, b.ensemble.hits, equal_nan=True)
    assert np.array_equal(a.ensemble.status, b.ensemble.status)
    assert a.ensemble.detected.sum() > 50


def test_classical_pattern_totals(small_slits):
    sc = small_slits
    kw = dict(n_particles=1500, bins=30)
    A = classical_pattern(sc, "A", **kw)
    B = classical_pattern(sc, "B", **kw)
    both = classical_pattern(sc, "both_incoherent", **kw)
    assert both.n_total == A.n_total + B.n_total
    assert np.array_equal(both.counts, A.counts + B.counts)
    # closing slit B leaves exactly the single-slit A experiment
    exp = run_dot_experiment(sc, slits=sc.slits.only(0), n_particles=1500)
    direct = accumulate_dots(exp.ensemble, exp.screen, 30, grid=sc.grid,
                             window=sc.trajectories.window(sc.grid))
    assert np.array_equal(A.counts, direct.counts)
    # mirror-symmetric slits give mirrored single-slit patterns
    flux_a = run_dot_experiment(sc, slits=sc.slits.only(0), n_particles=1).flux
    flux_b = run_dot_experiment(sc, slits=sc.slits.only(1), n_particles=1).flux
    assert np.allclose(flux_a.fluence, flux_b.fluence[::-1], atol=1e-8 * flux_a.fluence.max())


def test_classical_pattern_needs_two_slits(small_slits):
    sc = small_slits.with_slits(small_slits.slits.only(0))
    with pytest.raises(ValueError, match="double-slit"):
        classical_pattern(sc)
