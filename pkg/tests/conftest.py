import numpy as np
import pytest

from simto.fem import DensityField, GridSpec
from simto.grasp.mesh import mesh_from_density, triangulate_polygon
from simto.grasp.shapes import circle
from simto.grasp.sim import ContactEvent, SimTrace, StepRecord, SimConfig
from simto.topopt import DesignDomain


@pytest.fixture(scope="session")
def coarse_domain():
    """150 x 70 mm domain on 5 mm elements."""
    return DesignDomain.default(GridSpec(30, 14, 5.0))


@pytest.fixture(scope="session")
def coarse_finger(coarse_domain):
    return mesh_from_density(DensityField.uniform(coarse_domain.grid, 1.0), domain=coarse_domain)


@pytest.fixture(scope="session")
def disc():
    return triangulate_polygon(circle(25.0, 48), spacing=6.0)


def synthetic_trace(rng, reference, n_steps=4, n_events=6, rotate=True, fingers=("left", "right"), dim=2):
    """Trace whose finger configurations are noisy rigid motions of ``reference``."""
    n = reference.shape[0]
    slices = {"left": slice(0, n), "right": slice(n, 2 * n), "object": slice(2 * n, 2 * n + 1)}
    steps, positions = [], []
    for k in range(n_steps):
        pos = np.zeros((2 * n + 1, 2))
        for side in ("left", "right"):
            a = rng.uniform(-np.pi, np.pi) if rotate else 0.0
            R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
            P = reference @ R.T + rng.normal(size=2) * 20 + rng.normal(scale=0.3, size=reference.shape)
            pos[slices[side]] = P * np.array([-1.0, 1.0]) if side == "right" else P
        events = []
        for _ in range(rng.integers(0, n_events + 1)):
            side = str(rng.choice(fingers))
            node = int(rng.integers(0, n))
            f = rng.normal(size=2)
            events.append(ContactEvent(side, node, pos[slices[side]][node].copy(), f, np.array([0.0, 1.0])))
        steps.append(StepRecord(k + 1, 0.01 * (k + 1), events, False, 0.0, np.zeros(2), np.zeros(2)))
        positions.append(pos)
    return SimTrace(SimConfig(N_t=max(2, 2 * ((n_steps + 1) // 2))), steps, positions, slices,
                    reference.copy(), positions[0].copy(), np.ones(2 * n + 1))
