import numpy as np
import pytest

from pilotwave.fields import Grid, PhysicsConstants, WaveFunction


def gaussian_psi(grid: Grid, sigma: float = 1.0, k0: float = 0.0, x0: float = 0.0,
                 consts: PhysicsConstants | None = None) -> WaveFunction:
    """Normalised 1D Gaussian packet with |psi|^2 of standard deviation sigma."""
    x = grid.axes[0]
    amp = (2 * np.pi * sigma ** 2) ** -0.25 * np.exp(-((x - x0) ** 2) / (4 * sigma ** 2))
    return WaveFunction(grid, amp * np.exp(1j * k0 * x), consts or PhysicsConstants())


def free_gaussian_exact(x: np.ndarray, t: float, sigma0: float = 1.0, hbar: float = 1.0,
                        m: float = 1.0) -> np.ndarray:
    """Analytic free evolution of the centred Gaussian packet at rest."""
    a = 1.0 + 1j * hbar * t / (2 * m * sigma0 ** 2)
    return (2 * np.pi * sigma0 ** 2) ** -0.25 / np.sqrt(a) * np.exp(-x ** 2 / (4 * sigma0 ** 2 * a))


@pytest.fixture
def line_grid():
    return Grid.line(801, -20.0, 20.0)


SMALL_SLITS = """
[grid]
dim = 2
nx = 161
ny = 128
x_min = 0
x_max = 40
y_min = -16
y_max = 16

[time]
dt = 0.05
n_steps = 240
snapshot_stride = 2

[initial]
kind = gaussian
x0 = 8
sigma_x = 1.5
sigma_y = 3
kx = 3.0

[potential]
kind = barrier

[slits]
barrier_x = 16
thickness = 0.5
centers = -3, 3
width = 1.5
height = 1000

[trajectories]
n_particles = 4000
seed = 11
screen_x = 30
bins = 40
"""


@pytest.fixture
def small_slits():
    from pilotwave.scenario import parse_scenario
    return parse_scenario(SMALL_SLITS, name="small_slits")
