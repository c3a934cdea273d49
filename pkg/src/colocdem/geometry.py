"""Domain, structured grid, point location and partition maps.

Global cell index convention: ``i = ix + nx * (iy + ny * iz)``.
Cells are half-open boxes ``[lo, hi)``; a point on an interior face belongs to
the cell on the higher-index side.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InvalidArgument


@dataclass(frozen=True)
class DomainBox:
    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min_corner)
        hi = tuple(float(v) for v in self.max_corner)
        if len(lo) != 3 or len(hi) != 3:
            raise InvalidArgument("domain corners must be 3-vectors")
        for k in range(3):
            if not hi[k] > lo[k]:
                raise InvalidArgument(f"domain max_corner[{k}] must exceed min_corner[{k}]")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.max_corner) - np.asarray(self.min_corner)

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        lo = np.asarray(self.min_corner)
        hi = np.asarray(self.max_corner)
        return np.all((p >= lo) & (p < hi), axis=-1)


@dataclass(frozen=True)
class GridSpec:
    domain: DomainBox
    n_cells: tuple[int, int, int]
    cell_size: tuple[float, float, float]

    @property
    def total(self) -> int:
        nx, ny, nz = self.n_cells
        return nx * ny * nz

    @property
    def cell_volume(self) -> float:
        hx, hy, hz = self.cell_size
        return hx * hy * hz

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.domain.min_corner)

    @property
    def h(self) -> np.ndarray:
        return np.asarray(self.cell_size)

    def face_coord(self, axis: int, i) -> np.ndarray:
        """Coordinate of the lower face of cell ``i`` along ``axis``."""
        return self.domain.min_corner[axis] + np.asarray(i) * self.cell_size[axis]

    def centroid(self, idx) -> np.ndarray:
        ijk = self.unravel(idx)
        return self.lo + (ijk + 0.5) * self.h

    def centroids(self) -> np.ndarray:
        return self.centroid(np.arange(self.total))

    def ravel(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk)
        nx, ny, _ = self.n_cells
        return ijk[..., 0] + nx * (ijk[..., 1] + ny * ijk[..., 2])

    def unravel(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        nx, ny, _ = self.n_cells
        ix = idx % nx
        iy = (idx // nx) % ny
        iz = idx // (nx * ny)
        return np.stack([ix, iy, iz], axis=-1)


def build_grid(domain: DomainBox, n_cells) -> GridSpec:
    counts = tuple(int(c) for c in n_cells)
    if len(counts) != 3:
        raise InvalidArgument("n_cells must have 3 entries")
    if any(c < 1 for c in counts):
        raise InvalidArgument(f"cell counts must be >= 1, got {counts}")
    ext = domain.extent
    size = tuple(float(ext[k] / counts[k]) for k in range(3))
    return GridSpec(domain, counts, size)


def cell_ijk(grid: GridSpec, p) -> tuple[np.ndarray, np.ndarray]:
    """Integer cell coordinates of points ``p`` (shape (..., 3)) and an inside mask.

    The floor is corrected against the face coordinates ``lo + i*h`` so that
    points exactly on a face always land on the higher-index side.
    """
    p = np.asarray(p, dtype=float)
    lo = grid.lo
    h = grid.h
    n = np.asarray(grid.n_cells)
    with np.errstate(invalid="ignore"):
        ijk = np.floor((p - lo) / h).astype(np.int64)
        up = lo + (ijk + 1) * h <= p
        ijk = ijk + up
        down = lo + ijk * h > p
        ijk = ijk - down
    inside = np.all((ijk >= 0) & (ijk < n), axis=-1) & np.all(np.isfinite(p), axis=-1)
    return ijk, inside


def cell_of_point(grid: GridSpec, p):
    """Global index of the cell containing ``p``, or ``None`` outside the domain.

    Vectorised input (shape (n, 3)) returns an int array with ``-1`` for outside.
    """
    p = np.asarray(p, dtype=float)
    ijk, inside = cell_ijk(grid, p)
    idx = np.where(inside, grid.ravel(np.clip(ijk, 0, None)), -1)
    if p.ndim == 1:
        return int(idx) if inside else None
    return idx


@dataclass(frozen=True, eq=False)
class PartitionMap:
    grid: GridSpec
    owner: np.ndarray
    n_ranks: int

    def __post_init__(self):
        owner = np.asarray(self.owner, dtype=np.int64)
        if owner.shape != (self.grid.total,):
            raise InvalidArgument(
                f"owner array has {owner.size} entries for a {self.grid.total}-cell grid")
        if self.n_ranks < 1:
            raise InvalidArgument("n_ranks must be >= 1")
        if owner.size and (owner.min() < 0 or owner.max() >= self.n_ranks):
            raise InvalidArgument("owner ids must lie in [0, n_ranks)")
        counts = np.bincount(owner, minlength=self.n_ranks)
        if np.any(counts == 0):
            empty = np.flatnonzero(counts == 0).tolist()
            raise InvalidArgument(f"ranks {empty} own no cells")
        owner.setflags(write=False)
        object.__setattr__(self, "owner", owner)

    def cell_counts(self) -> np.ndarray:
        return np.bincount(self.owner, minlength=self.n_ranks)

    def cells_of(self, rank: int) -> np.ndarray:
        return np.flatnonzero(self.owner == rank)

    def same_as(self, other: "PartitionMap") -> bool:
        return (self.n_ranks == other.n_ranks and self.grid == other.grid
                and np.array_equal(self.owner, other.owner))

    def owner_of_points(self, p) -> np.ndarray:
        idx = cell_of_point(self.grid, np.atleast_2d(p))
        return np.where(idx >= 0, self.owner[np.maximum(idx, 0)], -1)

    def box_of(self, rank: int) -> tuple[np.ndarray, np.ndarray]:
        """Index box ``[lo, hi)`` of a rank; raises if its cells are not a box."""
        ijk = self.grid.unravel(self.cells_of(rank))
        lo = ijk.min(axis=0)
        hi = ijk.max(axis=0) + 1
        if int(np.prod(hi - lo)) != len(ijk):
            raise ConfigError(f"rank {rank} cells do not form an axis-aligned box")
        return lo, hi


def _split_sizes(n: int, parts: int) -> np.ndarray:
    base, rem = divmod(n, parts)
    return np.array([base + 1 if r < rem else base for r in range(parts)], dtype=np.int64)


def _axis_owner(n: int, parts: int) -> np.ndarray:
    """Block index along one axis; remainder cells go to the lower blocks."""
    return np.repeat(np.arange(parts, dtype=np.int64), _split_sizes(n, parts))


def uniform_partition(grid: GridSpec, rank_grid) -> PartitionMap:
    rg = tuple(int(r) for r in rank_grid)
    if len(rg) != 3 or any(r < 1 for r in rg):
        raise InvalidArgument(f"rank_grid must be 3 positive integers, got {rank_grid}")
    for k in range(3):
        if rg[k] > grid.n_cells[k]:
            raise InvalidArgument(
                f"rank_grid[{k}]={rg[k]} exceeds {grid.n_cells[k]} cells along axis {k}")
    ax = [_axis_owner(grid.n_cells[k], rg[k]) for k in range(3)]
    ijk = grid.unravel(np.arange(grid.total))
    owner = ax[0][ijk[:, 0]] + rg[0] * (ax[1][ijk[:, 1]] + rg[1] * ax[2][ijk[:, 2]])
    return PartitionMap(grid, owner, rg[0] * rg[1] * rg[2])


def independent_partition(grid: GridSpec, n_ranks: int, axis_cfd: int, axis_dem: int):
    """Deliberately misaligned slab decompositions: the comparison baseline."""
    if axis_cfd == axis_dem:
        raise InvalidArgument("axis_cfd and axis_dem must differ")
    maps = []
    for axis in (axis_cfd, axis_dem):
        if axis not in (0, 1, 2):
            raise InvalidArgument(f"axis must be 0, 1 or 2, got {axis}")
        rg = [1, 1, 1]
        rg[axis] = int(n_ranks)
        maps.append(uniform_partition(grid, rg))
    return maps[0], maps[1]


def auto_rank_grid(grid: GridSpec, n_ranks: int) -> tuple[int, int, int]:
    """Factor ``n_ranks`` by repeatedly splitting the axis with most cells per block."""
    rg = [1, 1, 1]
    remaining = int(n_ranks)
    p = 2
    factors = []
    while remaining > 1:
        while remaining % p == 0:
            factors.append(p)
            remaining //= p
        p += 1
    for f in sorted(factors, reverse=True):
        per = [grid.n_cells[k] / rg[k] for k in range(3)]
        order = sorted(range(3), key=lambda k: (-per[k], k))
        for k in order:
            if rg[k] * f <= grid.n_cells[k]:
                rg[k] *= f
                break
        else:
            raise InvalidArgument(f"cannot place {n_ranks} ranks on grid {grid.n_cells}")
    return tuple(rg)


def write_manual_partition(pmap: PartitionMap, path) -> None:
    lines = [f"{pmap.grid.total} {pmap.n_ranks}"]
    lines.extend(str(int(r)) for r in pmap.owner)
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))


def read_manual_partition(path, grid: GridSpec) -> PartitionMap:
    text = Path(path).read_text(encoding="ascii")
    rows = text.split("\n")
    if rows and rows[-1] == "":
        rows.pop()
    if not rows:
        raise FormatError(f"{path}: empty partition file")
    head = rows[0].split()
    if len(head) != 2:
        raise FormatError(f"{path}: header must be '<n_cells> <n_ranks>'")
    try:
        n_cells, n_ranks = int(head[0]), int(head[1])
        owner = np.array([int(r) for r in rows[1:]], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: non-integer entry ({exc})") from None
    if n_cells != grid.total:
        raise FormatError(f"{path}: header declares {n_cells} cells, grid has {grid.total}")
    if owner.size != grid.total:
        raise FormatError(f"{path}: {owner.size} owner entries for a {grid.total}-cell grid")
    bad = (owner < 0) | (owner >= n_ranks)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise FormatError(f"{path}: cell {i} has rank {owner[i]} outside [0, {n_ranks})")
    try:
        return PartitionMap(grid, owner, n_ranks)
    except InvalidArgument as exc:
        raise FormatError(f"{path}: {exc}") from None
