"""Fluid-particle data exchange: porosity, velocity sampling and drag sources.

These are pure functions on rank-local data. Every accumulation into a cell
happens in ascending particle id (then sample) order, so a cell receives the
same floating-point sum whether its particles live on one rank or several.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cfd import FluidField, FpiSource, from_flat
from .dem import FluidProps, ParticleSet, drag_force
from .errors import InterpolationError, ProjectionError
from .geometry import GridSpec, cell_ijk

log = logging.getLogger(__name__)

EPS_MIN = 0.3

# bytes per (cell, particle) dependency
STENCIL_BYTES = 4 * 8   # u (3) and eps
POROSITY_BYTES = 8      # deposited volume
FPI_BYTES = 4 * 8       # explicit source (3) and implicit coefficient


# --------------------------------------------------------------------------- porosity

def sample_offsets(n: int) -> np.ndarray:
    """Unit-sphere sample offsets of an ``n^3`` lattice in the bounding box."""
    s = -1.0 + (2.0 * np.arange(n) + 1.0) / n
    g = np.stack(np.meshgrid(s, s, s, indexing="ij"), axis=-1).reshape(-1, 3)
    return g[np.sum(g * g, axis=1) <= 1.0]


def porosity_samples(ps: ParticleSet, grid: GridSpec, n: int = 2):
    """Per-sample deposits ``(cell, particle_id, volume)`` ordered by (id, sample).

    Samples falling outside the domain are assigned to the nearest boundary cell
    so the deposited volume always equals the particle volume.
    """
    if n < 1:
        raise ProjectionError("subsamples_per_axis must be >= 1")
    if not len(ps):
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    _, inside = cell_ijk(grid, ps.x)
    if not inside.all():
        bad = int(ps.id[np.flatnonzero(~inside)[0]])
        raise ProjectionError(f"particle {bad} lies outside the domain")
    off = sample_offsets(n)
    m = len(off)
    pts = ps.x[:, None, :] + ps.radius[:, None, None] * off[None, :, :]
    ijk, _ = cell_ijk(grid, pts.reshape(-1, 3))
    ijk = np.clip(ijk, 0, np.asarray(grid.n_cells) - 1)
    cells = grid.ravel(ijk)
    pid = np.repeat(ps.id, m)
    vol = np.repeat(ps.volume / m, m)
    order = np.argsort(pid, kind="stable")
    return cells[order], pid[order], vol[order]


def deposit(cells: np.ndarray, vols: np.ndarray, size: int, index=None) -> np.ndarray:
    """Sequential accumulation in the given order."""
    out = np.zeros(size)
    if cells.size:
        np.add.at(out, cells if index is None else index, vols)
    return out


def porosity_from_volume(solid: np.ndarray, cell_volume: float, eps_min: float = EPS_MIN):
    """``eps = 1 - solid/V`` floored at ``eps_min``; returns ``(eps, n_floored)``."""
    eps = 1.0 - solid / cell_volume
    low = eps < eps_min
    n_low = int(np.count_nonzero(low))
    if n_low:
        log.warning("porosity floored at %g in %d cells", eps_min, n_low)
        eps = np.where(low, eps_min, eps)
    return eps, n_low


def project_porosity(ps: ParticleSet, grid: GridSpec, subsamples_per_axis: int = 2,
                     eps_min: float = EPS_MIN, return_volume: bool = False):
    """Per-cell porosity, shape (nx, ny, nz)."""
    cells, _, vol = porosity_samples(ps, grid, subsamples_per_axis)
    solid = deposit(cells, vol, grid.total)
    eps, _ = porosity_from_volume(solid, grid.cell_volume, eps_min)
    eps3 = from_flat(eps, grid.n_cells)
    if return_volume:
        return eps3, from_flat(solid, grid.n_cells)
    return eps3


# --------------------------------------------------------------------------- interpolation

def stencil(grid: GridSpec, positions):
    """Trilinear stencil: corner cells (m, 8, 3) and fractional weights (m, 3).

    Sample points are clamped into the band of cell centroids, so nothing is
    extrapolated near domain faces.
    """
    q = np.atleast_2d(np.asarray(positions, dtype=float))
    _, inside = cell_ijk(grid, q)
    if not inside.all():
        bad = np.flatnonzero(~inside)[0]
        raise InterpolationError(f"position {q[bad].tolist()} lies outside the domain")
    n = np.asarray(grid.n_cells)
    c0 = grid.lo + 0.5 * grid.h
    s = np.clip((q - c0) / grid.h, 0.0, n - 1)
    near = np.round(s)
    s = np.where(np.abs(s - near) < 1e-13, near, s)
    i0 = np.clip(np.floor(s).astype(np.int64), 0, n - 1)
    t = s - i0
    i1 = np.minimum(i0 + 1, n - 1)
    t = np.where(i1 == i0, 0.0, t)
    corners = np.empty((len(q), 8, 3), dtype=np.int64)
    for c in range(8):
        bits = ((c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1)
        for k in range(3):
            corners[:, c, k] = i1[:, k] if bits[k] else i0[:, k]
    return corners, t


def trilinear(vals: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Blend corner values (m, 8, C) with weights (m, 3) as successive lerps x, y, z."""
    tx, ty, tz = (t[:, k][:, None] for k in range(3))
    v = vals
    x00 = v[:, 0] + tx * (v[:, 1] - v[:, 0])
    x10 = v[:, 2] + tx * (v[:, 3] - v[:, 2])
    x01 = v[:, 4] + tx * (v[:, 5] - v[:, 4])
    x11 = v[:, 6] + tx * (v[:, 7] - v[:, 6])
    y0 = x00 + ty * (x10 - x00)
    y1 = x01 + ty * (x11 - x01)
    return y0 + tz * (y1 - y0)


def gather_block(fld: FluidField, corners: np.ndarray) -> np.ndarray:
    """Corner values (m, 8, 4) = (u, eps) read from a block's padded arrays."""
    loc = fld.block.local_padded(corners)
    ok = np.all((loc >= 0) & (loc < np.asarray(fld.block.padded_shape)), axis=-1)
    if not ok.all():
        raise InterpolationError("stencil reaches beyond the block's ghost layer")
    li, lj, lk = loc[..., 0], loc[..., 1], loc[..., 2]
    out = np.empty(corners.shape[:2] + (4,))
    out[..., :3] = np.moveaxis(fld.u_pad[:, li, lj, lk], 0, -1)
    out[..., 3] = fld.eps_pad[li, lj, lk]
    return out


def interpolate_fluid_velocity(fld: FluidField, position) -> np.ndarray:
    """Trilinear fluid velocity at one position (3,) or many (m, 3)."""
    q = np.asarray(position, dtype=float)
    corners, t = stencil(fld.grid, q)
    out = trilinear(gather_block(fld, corners)[..., :3], t)
    return out[0] if q.ndim == 1 else out


def center_eps(fld: FluidField, positions) -> np.ndarray:
    ijk, _ = cell_ijk(fld.grid, positions)
    loc = fld.block.local_padded(ijk)
    return fld.eps_pad[loc[:, 0], loc[:, 1], loc[:, 2]]


# --------------------------------------------------------------------------- drag source

def fpi_contributions(beta: np.ndarray, slip: np.ndarray, eps_cell: np.ndarray,
                      cell_volume: float, rho_f: float):
    """Per-particle ``(b, s)``: implicit rate and explicit slip source of each particle."""
    b = beta * (1.0 / (rho_f * cell_volume * eps_cell))
    return b, b[:, None] * slip


def accumulate_cells(cells: np.ndarray, b: np.ndarray, s: np.ndarray):
    """Sum per-particle contributions into their cells, in the given order.

    Returns ``(unique_cells, B, S)``.
    """
    uc, inv = np.unique(cells, return_inverse=True)
    B = np.zeros(uc.size)
    S = np.zeros((uc.size, 3))
    if cells.size:
        np.add.at(B, inv, b)
        np.add.at(S, inv, s)
    return uc, B, S


def fpi_by_cell(cells: np.ndarray, beta: np.ndarray, slip: np.ndarray, eps_cell: np.ndarray,
                cell_volume: float, rho_f: float):
    """Compact per-cell drag terms, summed in the given particle order.

    ``slip`` is ``u_p - u_f``. Returns ``(unique_cells, B, explicit)``.
    """
    b, s = fpi_contributions(beta, slip, eps_cell, cell_volume, rho_f)
    return accumulate_cells(cells, b, s)


def accumulate_fpi(cells, beta, u_p, u_f, eps_cell, grid: GridSpec, fluid: FluidProps) -> FpiSource:
    """Global :class:`FpiSource` from per-particle drag data (particles sorted by id)."""
    beta = np.asarray(beta, float)
    if np.any(~np.isfinite(beta)) or np.any(beta < 0):
        raise ValueError("drag coefficients must be finite and >= 0")
    slip = np.asarray(u_p, float) - np.asarray(u_f, float)
    uc, B, S = fpi_by_cell(np.asarray(cells), beta, slip, np.asarray(eps_cell, float),
                           grid.cell_volume, fluid.rho_f)
    Bf = np.zeros(grid.total)
    Sf = np.zeros((3, grid.total))
    Bf[uc] = B
    Sf[:, uc] = S.T
    return FpiSource(from_flat(Sf, grid.n_cells), from_flat(Bf, grid.n_cells))


def effective_drag(force: np.ndarray, b_cell: np.ndarray, dt: float) -> np.ndarray:
    """Particle drag consistent with the fluid's semi-implicit relaxation."""
    return force / (1.0 + dt * b_cell)[:, None]


# --------------------------------------------------------------------------- exchange record

@dataclass
class ExchangeRecord:
    """Inter-physics dependencies of one coupling pass on a single partition."""

    stencil_reads: int = 0
    porosity_deposits: int = 0
    fpi_deposits: int = 0
    bytes: int = 0
    eps: np.ndarray | None = field(default=None, repr=False)
    fpi: FpiSource | None = field(default=None, repr=False)
    drag: np.ndarray | None = field(default=None, repr=False)

    @property
    def items(self) -> int:
        return self.stencil_reads + self.porosity_deposits + self.fpi_deposits


def unique_pairs(cells: np.ndarray, pids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distinct (cell, particle) pairs, ordered by particle then cell."""
    if not cells.size:
        return cells, pids
    cells = np.asarray(cells, np.int64)
    span = np.int64(cells.max()) + 1
    key = np.unique(np.asarray(pids, np.int64) * span + cells)
    return key % span, key // span


def coupling_pass(ps: ParticleSet, fld: FluidField, fluid: FluidProps, dt: float,
                  subsamples: int = 2, eps_min: float = EPS_MIN) -> ExchangeRecord:
    """Every inter-physics exchange of one step on a single-block field."""
    grid = fld.grid
    corners, t = stencil(grid, ps.x)
    vals = gather_block(fld, corners)
    u_f = trilinear(vals[..., :3], t)
    eps_p = center_eps(fld, ps.x)
    force, beta = drag_force(ps.u, u_f, eps_p, ps.d, fluid)
    cells_c, _ = cell_ijk(grid, ps.x)
    cells_c = grid.ravel(cells_c)
    fpi = accumulate_fpi(cells_c, beta, ps.u, u_f, eps_p, grid, fluid)
    b_cell = from_flat_lookup(fpi.implicit, grid, cells_c)
    drag = effective_drag(force, b_cell, dt)
    sc, sp, sv = porosity_samples(ps, grid, subsamples)
    solid = deposit(sc, sv, grid.total)
    eps, _ = porosity_from_volume(solid, grid.cell_volume, eps_min)
    st_cells = grid.ravel(corners).ravel()
    st_pids = np.repeat(ps.id, 8)
    n_st = unique_pairs(st_cells, st_pids)[0].size
    n_por = unique_pairs(sc, sp)[0].size
    rec = ExchangeRecord(n_st, n_por, len(ps))
    rec.bytes = n_st * STENCIL_BYTES + n_por * POROSITY_BYTES + len(ps) * FPI_BYTES
    rec.eps = from_flat(eps, grid.n_cells)
    rec.fpi = fpi
    rec.drag = drag
    return rec


def from_flat_lookup(arr3: np.ndarray, grid: GridSpec, cells: np.ndarray) -> np.ndarray:
    ijk = grid.unravel(cells)
    return arr3[ijk[:, 0], ijk[:, 1], ijk[:, 2]]


def dummy_dem_step(ps: ParticleSet, fld: FluidField, fluid: FluidProps, dt: float,
                   subsamples: int = 2, eps_min: float = EPS_MIN) -> ExchangeRecord:
    """All coupling exchanges with frozen particles: no contacts, no integration.

    The particle set is not modified.
    """
    return coupling_pass(ps, fld, fluid, dt, subsamples, eps_min)
