import numpy as np
import pytest

from colocdem.cfd import BoundarySpec
from colocdem.dem import ContactParams, FluidProps, ParticleSet
from colocdem.geometry import DomainBox, build_grid
from colocdem.runtime.world import RunConfig, Scene


@pytest.fixture
def unit_grid():
    return build_grid(DomainBox((0, 0, 0), (1, 1, 1)), (4, 4, 4))


@pytest.fixture
def water():
    return FluidProps(1000.0, 1e-3, (0.0, 0.0, 0.0))


@pytest.fixture
def air():
    return FluidProps(1.2, 1.8e-5, (0.0, 0.0, 0.0))


def channel_setup(n_cells=(15, 4, 4), extent=(1.0, 0.2, 0.2), particles=None, dt=0.002,
                  **kw):
    """Small inlet/outlet channel scene used across runtime tests."""
    grid = build_grid(DomainBox((0, 0, 0), extent), n_cells)
    if particles is None:
        particles = ParticleSet.create([0], [[0.4, 0.1, 0.1]], d=0.002, rho=1100.0)
    cfg = RunConfig(dt=dt, fluid=FluidProps(1000.0, 1e-3, (0, 0, 0)),
                    bc=BoundarySpec.channel((1.0, 0.0, 0.0), 0, 0.0),
                    contact=kw.pop("contact", ContactParams(k_n=100.0)), **kw)
    return grid, Scene(grid, particles, (1.0, 0.0, 0.0)), cfg


def random_packing(rng, n, lo, hi, d, min_gap=0.0):
    """Random non-coincident centres in a box (overlaps allowed unless ``min_gap`` > 0)."""
    pts = []
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    while len(pts) < n:
        p = rng.uniform(lo, hi)
        if min_gap > 0 and pts and np.min(np.linalg.norm(np.array(pts) - p, axis=1)) < min_gap:
            continue
        pts.append(p)
    return np.array(pts)
