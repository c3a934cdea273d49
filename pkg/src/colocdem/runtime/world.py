"""Rank workers owning CFD blocks and DEM regions, driven in bulk-synchronous supersteps.

Rank code is written as generators: each ``yield`` is a barrier. Messages sent
before a barrier are readable after it. The :class:`World` resumes every rank
once per superstep, optionally on a thread pool.
"""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import coupling as cp
from ..cfd import (Block, BoundarySpec, FluidField, FpiSource, apply_all_bc, advance_fluid_gen,
                   divergence_field, face_eps, face_velocities, to_flat)
from ..dem import (BodyForce, ContactHistory, ContactParams, FluidProps, ParticleSet,
                   contact_forces, drag_force, integrate_particles, wall_forces)
from ..errors import ConfigError, InvalidArgument, TopologyError, WorkerError
from ..geometry import GridSpec, PartitionMap, cell_ijk
from .ledger import CFD, CLASSES, DEM, LOCAL, REMOTE, ExchangeLedger, merge
from .transport import Transport

log = logging.getLogger(__name__)

THREADS_ENV = "COLOCDEM_MAX_THREADS"
PHASES = ("migrate", "cfd_to_dem", "dem", "dem_to_cfd", "halo", "fluid", "report")


@dataclass
class RunConfig:
    dt: float
    fluid: FluidProps
    bc: BoundarySpec
    contact: ContactParams = field(default_factory=lambda: ContactParams(k_n=1.0))
    body: BodyForce = field(default_factory=BodyForce)
    dummy: bool = False
    subsamples: int = 2
    eps_min: float = cp.EPS_MIN
    boundary_policy: str = "reflect"
    particle_walls: tuple = (True,) * 6
    tol: float = 1e-10
    max_iter: int | None = None
    threads: int | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if self.boundary_policy not in ("reflect", "remove"):
            raise ConfigError(f"boundary_policy must be 'reflect' or 'remove', "
                              f"got {self.boundary_policy!r}")
        if self.subsamples < 1:
            raise ConfigError("subsamples must be >= 1")


@dataclass
class Scene:
    grid: GridSpec
    particles: ParticleSet
    u0: object = (0.0, 0.0, 0.0)
    history: ContactHistory | None = None


@dataclass
class StepReport:
    step: int
    time: float
    n_particles: int
    momentum: np.ndarray
    mean_velocity: np.ndarray
    mean_acceleration: float
    drag_total: np.ndarray
    solid_volume: float
    deposited_volume: float
    fluid_accel_l1: float
    mass_residual: float
    mass_balance: float
    floored: int
    tracked_x: np.ndarray
    tracked_owner: int
    pressure_iterations: int
    cfl: float
    ledger: dict
    phase_seconds: dict


# --------------------------------------------------------------------------- rank state

@dataclass
class RankState:
    rank: int
    block: Block
    cells: np.ndarray            # owned global cell ids (CFD)
    fld: FluidField
    ps: ParticleSet              # owned particles
    halo: ParticleSet
    history: ContactHistory
    ledger: ExchangeLedger
    comm: "RankComm" = None
    phase: str = "init"
    phase_seconds: dict = field(default_factory=dict)
    # per-step scratch
    snapshot: ParticleSet | None = None
    u_f: np.ndarray | None = None
    eps_p: np.ndarray | None = None
    drag: np.ndarray | None = None
    b_part: np.ndarray | None = None
    s_part: np.ndarray | None = None
    center: np.ndarray | None = None
    fpi: FpiSource | None = None
    solid: np.ndarray | None = None
    floored: int = 0
    u_before: np.ndarray | None = None
    v_before: np.ndarray | None = None
    info: object = None


class RankComm:
    """Communicator of one rank: ghost-layer exchange and ordered reductions."""

    def __init__(self, world: "World", rank: int, block: Block, sends: dict, recvs: dict):
        self.world = world
        self.rank = rank
        self.block = block
        self.sends = sends
        self.recvs = recvs
        self.n_ranks = world.n_ranks
        self.gids = to_flat(block.global_ids())
        self._seq = 0

    @property
    def ledger(self) -> ExchangeLedger:
        return self.world.ranks[self.rank].ledger

    def halo(self, arrays, tag="cfd"):
        t = self.world.transport
        t0 = time.perf_counter()
        n_msg = n_bytes = 0
        for q, idx in self.sends.items():
            payload = np.concatenate([a[(...,) + idx].reshape(-1, idx[0].size) for a in arrays])
            t.send(self.rank, q, tag, payload)
            n_msg += 1
            n_bytes += payload.nbytes
        sec = time.perf_counter() - t0
        yield
        t0 = time.perf_counter()
        for q, idx in self.recvs.items():
            payload = t.recv(self.rank, q, tag)
            row = 0
            for a in arrays:
                lead = a.shape[:-3]
                k = int(np.prod(lead)) if lead else 1
                a[(...,) + idx] = payload[row:row + k].reshape(lead + (idx[0].size,))
                row += k
        sec += time.perf_counter() - t0
        if n_msg:
            self.ledger.record(CFD, n_msg, n_bytes, 0, sec)

    def reduce(self, items, track: bool = False):
        """Generic reduction of ``(op, keys, values, size)`` items; returns a list."""
        self._seq += 1
        seq = self._seq
        t = self.world.transport
        t.contribute(self.rank, seq, [(op, k, v) for op, k, v, _ in items])
        yield
        out = t.result(seq, [size for *_, size in items])
        if track and self.n_ranks > 1:
            self.ledger.record(CFD, 1, 8 * len(items))
        return out

    def allreduce(self, items):
        """Reductions over block-local cell arrays in global cell order."""
        total = self.block.grid.total
        red = []
        for op, arr in items:
            red.append((op, self.gids, to_flat(np.asarray(arr)), total if op == "sum" else None))
        return (yield from self.reduce(red, track=True))


# --------------------------------------------------------------------------- world

def _halo_lists(cfd_map: PartitionMap, blocks: list):
    """Ghost-cell send and receive index lists per rank pair, ordered by global id."""
    grid = cfd_map.grid
    n = np.asarray(grid.n_cells)
    sends = [dict() for _ in blocks]
    recvs = [dict() for _ in blocks]
    for r, blk in enumerate(blocks):
        lo = np.asarray(blk.lo) - 1
        rng = [np.arange(lo[k], lo[k] + blk.shape[k] + 2) for k in range(3)]
        ijk = np.stack(np.meshgrid(*rng, indexing="ij"), axis=-1).reshape(-1, 3)
        inside = np.all((ijk >= 0) & (ijk < n), axis=1)
        ijk = ijk[inside]
        gid = grid.ravel(ijk)
        own = cfd_map.owner[gid]
        ghost = own != r
        ijk, gid, own = ijk[ghost], gid[ghost], own[ghost]
        order = np.lexsort((gid, own))
        ijk, gid, own = ijk[order], gid[order], own[order]
        for q in np.unique(own):
            m = own == q
            loc_r = blk.local_padded(ijk[m])
            loc_q = blocks[q].local_padded(ijk[m])
            recvs[r][int(q)] = tuple(loc_r.T)
            sends[q][r] = tuple(loc_q.T)
    sends = [dict(sorted(s.items())) for s in sends]
    recvs = [dict(sorted(s.items())) for s in recvs]
    return sends, recvs


def _box_bounds(pmap: PartitionMap, rank: int):
    lo, hi = pmap.box_of(rank)
    g = pmap.grid
    return g.lo + lo * g.h, g.lo + hi * g.h


def _box_distance(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    d = np.maximum(np.maximum(lo - x, 0.0), x - hi)
    return np.sqrt(np.sum(d * d, axis=1))


def max_threads(n_ranks: int, requested: int | None = None) -> int:
    cap = requested or int(os.environ.get(THREADS_ENV, "0") or 0) or (os.cpu_count() or 1)
    return max(1, min(n_ranks, cap))


class World:
    def __init__(self, cfd_map: PartitionMap, dem_map: PartitionMap, scene: Scene, cfg: RunConfig):
        self.cfd_map = cfd_map
        self.dem_map = dem_map
        self.grid = scene.grid
        self.cfg = cfg
        self.n_ranks = cfd_map.n_ranks
        self.colocated = cfd_map.same_as(dem_map)
        self.transport = Transport(self.n_ranks)
        self.step_index = 0
        self.time = 0.0
        self.reports: list[StepReport] = []
        self.timing: list = []
        self._threads = max_threads(self.n_ranks, cfg.threads)
        self._pool = ThreadPoolExecutor(self._threads) if self._threads > 1 else None

        grid = self.grid
        ps = scene.particles.sorted()
        _, inside = cell_ijk(grid, ps.x)
        if not inside.all():
            bad = int(ps.id[np.flatnonzero(~inside)[0]])
            raise ConfigError(f"particle {bad} starts outside the domain")
        if np.unique(ps.id).size != len(ps):
            raise ConfigError("particle ids must be unique")
        self.cutoff = float(ps.d.max()) if len(ps) else 0.0
        self.tracked_id = int(ps.id[0]) if len(ps) else -1
        self.dem_boxes = [_box_bounds(dem_map, r) for r in range(self.n_ranks)]

        blocks = []
        for r in range(self.n_ranks):
            lo, hi = cfd_map.box_of(r)
            blocks.append(Block(grid, tuple(int(v) for v in lo), tuple(int(v) for v in hi - lo)))
        sends, recvs = _halo_lists(cfd_map, blocks)

        u0 = np.asarray(scene.u0, float)
        eps0 = np.ones(grid.n_cells)
        if len(ps):
            eps0 = cp.project_porosity(ps, grid, cfg.subsamples, cfg.eps_min)
        owner = dem_map.owner_of_points(ps.x) if len(ps) else np.zeros(0, np.int64)
        hist = scene.history or ContactHistory()

        self.ranks: list[RankState] = []
        for r, blk in enumerate(blocks):
            sl = tuple(slice(blk.lo[k], blk.lo[k] + blk.shape[k]) for k in range(3))
            u_blk = u0 if u0.size == 3 else u0[(slice(None),) + sl]
            fld = FluidField.create(grid, u_blk, 0.0, eps0[sl], eps0[sl], block=blk)
            mine = ps.take(np.flatnonzero(owner == r))
            rs = RankState(r, blk, to_flat(blk.global_ids()), fld, mine, ParticleSet.empty(),
                           hist.involving(mine.id), ExchangeLedger(r))
            rs.comm = RankComm(self, r, blk, sends[r], recvs[r])
            self.ranks.append(rs)
        for rs in self.ranks:
            rs.ledger.begin(0)
        self._drive(lambda rs: self._halo_fields(rs))

    # ------------------------------------------------------------------ driving

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _resume(self, r: int, gen):
        rs = self.ranks[r]
        t0 = time.perf_counter()
        try:
            next(gen)
            done, value = False, None
        except StopIteration as stop:
            done, value = True, stop.value
        except WorkerError:
            raise
        except Exception as exc:
            raise WorkerError(r, exc) from exc
        finally:
            rs.phase_seconds[rs.phase] = rs.phase_seconds.get(rs.phase, 0.0) + (
                time.perf_counter() - t0)
        return done, value

    def _drive(self, make):
        """Run one SPMD generator per rank to completion; returns per-rank results."""
        gens = [make(rs) for rs in self.ranks]
        results = [None] * self.n_ranks
        active = list(range(self.n_ranks))
        while active:
            if self._pool is None:
                outs = [self._resume(r, gens[r]) for r in active]
            else:
                futs = [self._pool.submit(self._resume, r, gens[r]) for r in active]
                outs = [f.result() for f in futs]
            finished = [r for r, (done, _) in zip(active, outs) if done]
            if finished and len(finished) != len(active):
                raise TopologyError(f"ranks {finished} finished while others still wait")
            for r, (done, value) in zip(active, outs):
                if done:
                    results[r] = value
            active = [r for r, (done, _) in zip(active, outs) if not done]
        return results

    # ------------------------------------------------------------------ phases

    def _halo_fields(self, rs: RankState):
        fld = rs.fld
        yield from rs.comm.halo([fld.u_pad, fld.p_pad, fld.eps_pad], "cfd")
        apply_all_bc(fld, self.cfg.bc)

    def _migrate(self, rs: RankState):
        """Move particles to their owners, then copy boundary particles to neighbours."""
        t = self.transport
        r = rs.rank
        ps = rs.ps
        t0 = time.perf_counter()
        owner = self.dem_map.owner_of_points(ps.x) if len(ps) else np.zeros(0, np.int64)
        n_msg = n_bytes = 0
        for q in range(self.n_ranks):
            if q == r:
                continue
            sel = np.flatnonzero(owner == q)
            if sel.size:
                out = ps.take(sel)
                h = rs.history.involving(out.id)
                t.send(r, q, "migrate", (out, h))
                n_msg += 1
                n_bytes += out.nbytes() + h.keys.nbytes + h.xi.nbytes
            else:
                t.send(r, q, "migrate", None)
        kept = ps.take(np.flatnonzero(owner == r))
        sec = time.perf_counter() - t0
        yield
        t0 = time.perf_counter()
        incoming = [kept]
        hist = rs.history
        for q in range(self.n_ranks):
            if q == r:
                continue
            msg = t.recv(r, q, "migrate")
            if msg is not None:
                incoming.append(msg[0])
                hist = hist.merged(msg[1])
        rs.ps = ParticleSet.concat(incoming) if len(incoming) > 1 else kept
        rs.history = hist.involving(rs.ps.id)
        # halo copies
        x = rs.ps.x
        for q in range(self.n_ranks):
            if q == r:
                continue
            if len(rs.ps):
                lo, hi = self.dem_boxes[q]
                sel = np.flatnonzero(_box_distance(x, lo, hi) <= self.cutoff)
            else:
                sel = np.zeros(0, np.int64)
            if sel.size:
                out = rs.ps.take(sel)
                t.send(r, q, "halo", out)
                n_msg += 1
                n_bytes += out.nbytes()
            else:
                t.send(r, q, "halo", None)
        sec += time.perf_counter() - t0
        yield
        t0 = time.perf_counter()
        halos = []
        for q in range(self.n_ranks):
            if q == r:
                continue
            msg = t.recv(r, q, "halo")
            if msg is not None:
                halos.append(msg)
        rs.halo = ParticleSet.concat(halos)
        sec += time.perf_counter() - t0
        if n_msg:
            rs.ledger.record(DEM, n_msg, n_bytes, 0, sec)

    def _cfd_to_dem(self, rs: RankState):
        """Fluid velocity and porosity at every owned particle."""
        t = self.transport
        r = rs.rank
        grid = self.grid
        ps = rs.ps
        t0 = time.perf_counter()
        m = len(ps)
        corners, tw = cp.stencil(grid, ps.x) if m else (np.zeros((0, 8, 3), np.int64),
                                                        np.zeros((0, 3)))
        gids = grid.ravel(corners)
        vals = np.empty((m, 8, 4))
        if self.colocated:
            local = np.ones(gids.shape, bool)
        else:
            local = self.cfd_map.owner[gids] == r
        if local.any():
            vals[local] = cp.gather_block(rs.fld, corners[local][:, None, :])[:, 0, :]
        pid8 = np.repeat(ps.id, 8).reshape(m, 8)
        n_local = cp.unique_pairs(gids[local], pid8[local])[0].size
        sec_local = time.perf_counter() - t0
        sec_remote = 0.0
        if not self.colocated:
            t0 = time.perf_counter()
            rem_gids = np.unique(gids[~local])
            rem_owner = self.cfd_map.owner[rem_gids]
            n_msg = n_bytes = 0
            for q in range(self.n_ranks):
                if q == r:
                    continue
                req = rem_gids[rem_owner == q]
                t.send(r, q, "need", req if req.size else None)
                if req.size:
                    n_msg += 1
                    n_bytes += req.nbytes
            sec_remote += time.perf_counter() - t0
            yield
            t0 = time.perf_counter()
            for q in range(self.n_ranks):
                if q == r:
                    continue
                req = t.recv(r, q, "need")
                if req is None:
                    t.send(r, q, "give", None)
                    continue
                ijk = grid.unravel(req)
                resp = cp.gather_block(rs.fld, ijk[:, None, :])[:, 0, :]
                t.send(r, q, "give", resp)
                n_msg += 1
                n_bytes += resp.nbytes
            sec_remote += time.perf_counter() - t0
            yield
            t0 = time.perf_counter()
            table = {}
            for q in range(self.n_ranks):
                if q == r:
                    continue
                resp = t.recv(r, q, "give")
                if resp is not None:
                    table[q] = resp
            if rem_gids.size:
                got = np.empty((rem_gids.size, 4))
                for q, resp in table.items():
                    got[rem_owner == q] = resp
                pos = np.searchsorted(rem_gids, gids[~local])
                vals[~local] = got[pos]
            n_remote = cp.unique_pairs(gids[~local], pid8[~local])[0].size
            sec_remote += time.perf_counter() - t0
            if n_msg or n_remote:
                rs.ledger.record(REMOTE, n_msg, n_bytes, n_remote, sec_remote)
        t0 = time.perf_counter()
        rs.u_f = cp.trilinear(vals[..., :3], tw) if m else np.zeros((0, 3))
        center = grid.ravel(cell_ijk(grid, ps.x)[0]) if m else np.zeros(0, np.int64)
        which = np.argmax(gids == center[:, None], axis=1) if m else np.zeros(0, np.int64)
        rs.eps_p = vals[np.arange(m), which, 3]
        rs.center = center
        sec_local += time.perf_counter() - t0
        if n_local:
            rs.ledger.record(LOCAL, 0, n_local * cp.STENCIL_BYTES, n_local, sec_local)
        return
        yield  # noqa: unreachable

    def _dem_compute(self, rs: RankState):
        cfg = self.cfg
        grid = self.grid
        ps = rs.ps
        rs.snapshot = ps
        rs.v_before = ps.u.copy()
        m = len(ps)
        if not m:
            rs.drag = np.zeros((0, 3))
            rs.b_part = np.zeros(0)
            rs.s_part = np.zeros((0, 3))
            return
        force, beta = drag_force(ps.u, rs.u_f, rs.eps_p, ps.d, cfg.fluid)
        rs.b_part, rs.s_part = cp.fpi_contributions(beta, ps.u - rs.u_f, rs.eps_p,
                                                    grid.cell_volume, cfg.fluid.rho_f)
        uc, B, _ = cp.accumulate_cells(rs.center, rs.b_part, rs.s_part)
        b_at = B[np.searchsorted(uc, rs.center)]
        rs.drag = cp.effective_drag(force, b_at, cfg.dt)
        if cfg.dummy:
            return
        allp = ParticleSet.concat([ps, rs.halo]) if len(rs.halo) else ps
        Fc, Tc, hist = contact_forces(allp, cfg.contact, cfg.dt, rs.history)
        own = np.searchsorted(allp.id, ps.id)
        F = Fc[own] + rs.drag
        F = F + wall_forces(ps, grid.domain.min_corner, grid.domain.max_corner, cfg.contact,
                            cfg.particle_walls)
        F = F + ps.mass[:, None] * np.asarray(cfg.body.g, float)
        new = integrate_particles(ps, F, Tc[own], cfg.dt)
        rs.history = hist.involving(new.id)
        rs.ps = self._apply_policy(new, rs)
        return
        yield  # noqa: unreachable

    def _apply_policy(self, ps: ParticleSet, rs: RankState) -> ParticleSet:
        grid = self.grid
        _, inside = cell_ijk(grid, ps.x)
        if inside.all():
            return ps
        if self.cfg.boundary_policy == "remove":
            gone = ps.id[~inside]
            log.info("rank %d removed particles %s", rs.rank, gone.tolist())
            keep = ps.take(np.flatnonzero(inside))
            rs.history = rs.history.involving(keep.id)
            return keep
        ps = ps.copy()
        lo = grid.lo
        hi = np.asarray(grid.domain.max_corner)
        for k in range(3):
            below = ps.x[:, k] < lo[k]
            above = ps.x[:, k] >= hi[k]
            ps.x[below, k] = 2 * lo[k] - ps.x[below, k]
            ps.x[above, k] = 2 * hi[k] - ps.x[above, k]
            ps.u[below | above, k] *= -1.0
            ps.x[:, k] = np.clip(ps.x[:, k], lo[k], np.nextafter(hi[k], lo[k]))
        return ps

    def _dem_to_cfd(self, rs: RankState):
        """Porosity and drag sources into the CFD cells."""
        t = self.transport
        r = rs.rank
        grid = self.grid
        cfg = self.cfg
        blk = rs.block
        snap = rs.snapshot
        t0 = time.perf_counter()
        if self.colocated:
            src = ParticleSet.concat([snap, rs.halo]) if len(rs.halo) else snap
            sc, sp, sv = cp.porosity_samples(src, grid, cfg.subsamples)
            mine = self.cfd_map.owner[sc] == r
            sc, sp, sv = sc[mine], sp[mine], sv[mine]
            fc, fp, fb, fs = rs.center, snap.id, rs.b_part, rs.s_part
        else:
            sc, sp, sv = cp.porosity_samples(snap, grid, cfg.subsamples)
            fc, fp, fb, fs = rs.center, snap.id, rs.b_part, rs.s_part
            s_own = self.cfd_map.owner[sc]
            f_own = self.cfd_map.owner[fc]
            n_msg = n_bytes = 0
            n_items = 0
            t0 = time.perf_counter()
            for q in range(self.n_ranks):
                if q == r:
                    continue
                ms, mf = s_own == q, f_own == q
                if ms.any() or mf.any():
                    msg = (sc[ms], sp[ms], sv[ms], fc[mf], fp[mf], fb[mf], fs[mf])
                    t.send(r, q, "deposit", msg)
                    n_msg += 1
                    n_bytes += sum(a.nbytes for a in msg)
                    n_items += cp.unique_pairs(sc[ms], sp[ms])[0].size + int(mf.sum())
                else:
                    t.send(r, q, "deposit", None)
            ms, mf = s_own == r, f_own == r
            sc, sp, sv = sc[ms], sp[ms], sv[ms]
            fc, fp, fb, fs = fc[mf], fp[mf], fb[mf], fs[mf]
            sec_remote = time.perf_counter() - t0
            yield
            t0 = time.perf_counter()
            parts = [(sc, sp, sv, fc, fp, fb, fs)]
            for q in range(self.n_ranks):
                if q == r:
                    continue
                msg = t.recv(r, q, "deposit")
                if msg is not None:
                    parts.append(msg)
            n_loc = cp.unique_pairs(sc, sp)[0].size + fc.size
            cat = [np.concatenate([p[k] for p in parts]) for k in range(7)]
            sc, sp, sv, fc, fp, fb, fs = cat
            o = np.argsort(sp, kind="stable")
            sc, sp, sv = sc[o], sp[o], sv[o]
            o = np.argsort(fp, kind="stable")
            fc, fp, fb, fs = fc[o], fp[o], fb[o], fs[o]
            sec_remote += time.perf_counter() - t0
            if n_msg:
                rs.ledger.record(REMOTE, n_msg, n_bytes, n_items, sec_remote)
            t0 = time.perf_counter()
        if self.colocated:
            n_loc = cp.unique_pairs(sc, sp)[0].size + fc.size
        # deposit into the owned block, in (particle id, sample) order
        loc_s = blk.local_padded(grid.unravel(sc)) - 1
        solid = np.zeros(blk.shape)
        if sc.size:
            np.add.at(solid, tuple(loc_s.T), sv)
        eps, rs.floored = cp.porosity_from_volume(solid, grid.cell_volume, cfg.eps_min)
        rs.solid = solid
        uc, B, S = cp.accumulate_cells(fc, fb, fs)
        fpi = FpiSource.zeros(blk.shape)
        if uc.size:
            loc = tuple((blk.local_padded(grid.unravel(uc)) - 1).T)
            fpi.implicit[loc] = B
            fpi.explicit[(slice(None),) + loc] = S.T
        rs.fpi = fpi
        rs.u_before = rs.fld.u.copy()
        rs.fld = rs.fld.with_porosity(eps)
        if n_loc:
            rs.ledger.record(LOCAL, 0, n_loc * cp.POROSITY_BYTES, n_loc,
                             time.perf_counter() - t0)
        return
        yield  # noqa: unreachable

    def _fluid(self, rs: RankState):
        cfg = self.cfg
        rs.fld, rs.info = yield from advance_fluid_gen(rs.fld, cfg.fluid, cfg.bc, rs.fpi, cfg.dt,
                                                       rs.comm, cfg.tol, cfg.max_iter)

    def _report(self, rs: RankState):
        cfg = self.cfg
        grid = self.grid
        fld = rs.fld
        ps = rs.ps
        vol = grid.cell_volume
        ids = ps.id
        snap = rs.snapshot
        dv = np.abs(ps.u - rs.v_before[np.searchsorted(snap.id, ps.id)]) if len(ps) else ps.u
        du = np.abs(fld.u - rs.u_before)
        div = divergence_field(fld, cfg.dt)
        thr = np.zeros(rs.block.shape)
        for a, uf in enumerate(face_velocities(fld)):
            q = np.abs(face_eps(fld.eps_pad, a) * (vol / grid.h[a]) * uf)
            sl_lo = [slice(None)] * 3
            sl_hi = [slice(None)] * 3
            sl_lo[a] = slice(0, -1)
            sl_hi[a] = slice(1, None)
            thr += 0.5 * (q[tuple(sl_lo)] + q[tuple(sl_hi)])
        total = grid.total
        trk = ids == self.tracked_id
        sid = snap.id
        items = [
            ("sum", ids, np.ones(len(ps)), None),
            ("sum", ids, ps.mass * ps.u[:, 0], None),
            ("sum", ids, ps.mass * ps.u[:, 1], None),
            ("sum", ids, ps.mass * ps.u[:, 2], None),
            ("sum", ids, ps.u[:, 0], None),
            ("sum", ids, ps.u[:, 1], None),
            ("sum", ids, ps.u[:, 2], None),
            ("sum", ids, np.sqrt(np.sum(dv * dv, axis=1)) / cfg.dt, None),
            ("sum", sid, rs.drag[:, 0], None),
            ("sum", sid, rs.drag[:, 1], None),
            ("sum", sid, rs.drag[:, 2], None),
            ("sum", rs.comm.gids, to_flat((1.0 - fld.eps) * vol), total),
            ("sum", rs.comm.gids, to_flat(rs.solid), total),
            ("sum", rs.comm.gids, to_flat(np.sum(du, axis=0) * vol / cfg.dt), total),
            ("sum", rs.comm.gids, to_flat(div * vol), total),
            ("sum", rs.comm.gids, to_flat(thr), total),
            ("sum", np.array([rs.rank]), np.array([float(rs.floored)]), None),
            ("sum", ids[trk], ps.x[trk, 0], None),
            ("sum", ids[trk], ps.x[trk, 1], None),
            ("sum", ids[trk], ps.x[trk, 2], None),
            ("max", None, np.array([float(rs.rank) if trk.any() else -1.0]), None),
        ]
        res = yield from rs.comm.reduce(items)
        n = int(round(res[0]))
        mean_v = np.array(res[4:7]) / max(n, 1)
        return StepReport(
            step=self.step_index, time=self.time, n_particles=n,
            momentum=np.array(res[1:4]), mean_velocity=mean_v,
            mean_acceleration=res[7] / max(n, 1), drag_total=np.array(res[8:11]),
            solid_volume=res[11], deposited_volume=res[12], fluid_accel_l1=res[13],
            mass_residual=res[14],
            mass_balance=abs(res[14]) / res[15] if res[15] > 0 else abs(res[14]),
            floored=int(res[16]), tracked_x=np.array(res[17:20]),
            tracked_owner=int(res[20]), pressure_iterations=rs.info.iterations,
            cfl=rs.info.cfl, ledger={}, phase_seconds={})

    def _rank_step(self, rs: RankState):
        steps = [("migrate", self._migrate), ("cfd_to_dem", self._cfd_to_dem),
                 ("dem", self._dem_compute), ("dem_to_cfd", self._dem_to_cfd),
                 ("halo", self._halo_fields), ("fluid", self._fluid), ("report", self._report)]
        out = None
        for name, fn in steps:
            rs.phase = name
            out = yield from fn(rs)
        return out

    # ------------------------------------------------------------------ public API

    def step(self) -> StepReport:
        self.step_index += 1
        for rs in self.ranks:
            rs.ledger.begin(self.step_index)
            rs.phase_seconds = {}
        reports = self._drive(self._rank_step)
        self.time += self.cfg.dt
        rep = reports[0]
        rep.time = self.time
        rep.ledger = merge([rs.ledger for rs in self.ranks], self.step_index)
        rep.phase_seconds = {p: max(rs.phase_seconds.get(p, 0.0) for rs in self.ranks)
                             for p in PHASES}
        for p in PHASES:
            self.timing.append((self.step_index, p, rep.phase_seconds[p]))
        if self.transport.pending():
            raise TopologyError("undelivered messages after a step")
        self.reports.append(rep)
        return rep

    def run(self, n_steps: int, callback=None) -> list:
        out = []
        for _ in range(n_steps):
            rep = self.step()
            if callback is not None:
                callback(rep)
            out.append(rep)
        return out

    def halo_exchange_fields(self) -> None:
        self._drive(lambda rs: self._named("halo", self._halo_fields(rs), rs))

    def migrate_and_halo_particles(self) -> None:
        self._drive(lambda rs: self._named("migrate", self._migrate(rs), rs))

    def interphysics_exchange(self, direction: str) -> None:
        if direction == "cfd_to_dem":
            self._drive(lambda rs: self._named(direction, self._cfd_to_dem(rs), rs))
        elif direction == "dem_to_cfd":
            for rs in self.ranks:
                if rs.snapshot is None or rs.b_part is None:
                    self._dem_compute_frozen(rs)
            self._drive(lambda rs: self._named(direction, self._dem_to_cfd(rs), rs))
        else:
            raise InvalidArgument(f"unknown direction {direction!r}")

    def _dem_compute_frozen(self, rs: RankState) -> None:
        dummy = self.cfg.dummy
        self.cfg.dummy = True
        try:
            for _ in self._dem_compute(rs):
                pass
        finally:
            self.cfg.dummy = dummy

    @staticmethod
    def _named(name, gen, rs):
        rs.phase = name
        return (yield from gen)

    def begin_step(self) -> None:
        """Open a fresh ledger row for phases driven one by one."""
        self.step_index += 1
        for rs in self.ranks:
            rs.ledger.begin(self.step_index)

    def ledger_totals(self, step: int | None = None) -> dict:
        return merge([rs.ledger for rs in self.ranks],
                     self.step_index if step is None else step)

    def particles(self) -> ParticleSet:
        return ParticleSet.concat([rs.ps for rs in self.ranks])

    def fluid_arrays(self):
        """Global ``(u, p, eps)`` with shapes (3, nx, ny, nz), (nx, ny, nz), (nx, ny, nz)."""
        n = self.grid.n_cells
        u = np.zeros((3,) + tuple(n))
        p = np.zeros(n)
        eps = np.zeros(n)
        for rs in self.ranks:
            b = rs.block
            sl = tuple(slice(b.lo[k], b.lo[k] + b.shape[k]) for k in range(3))
            u[(slice(None),) + sl] = rs.fld.u
            p[sl] = rs.fld.p
            eps[sl] = rs.fld.eps
        return u, p, eps

    def history(self) -> ContactHistory:
        h = ContactHistory()
        for rs in self.ranks:
            h = h.merged(rs.history)
        return h


def spawn_world(n_ranks: int, maps, scene: Scene, config: RunConfig) -> World:
    """Create rank workers for one CFD map and one DEM map (identical when co-located)."""
    if isinstance(maps, PartitionMap):
        cfd_map = dem_map = maps
    else:
        cfd_map, dem_map = maps
    for name, m in (("cfd", cfd_map), ("dem", dem_map)):
        if m.n_ranks != n_ranks:
            raise ConfigError(f"{name} map has {m.n_ranks} ranks, expected {n_ranks}")
        if m.grid != scene.grid:
            raise ConfigError(f"{name} map was built for a different grid")
    for r in range(n_ranks):
        cfd_map.box_of(r)
        dem_map.box_of(r)
    return World(cfd_map, dem_map, scene, config)


def ledger_report(world: World, window=None) -> dict:
    """Per-class totals, shares of step time and per-rank breakdown over a step window."""
    steps = [r.step for r in world.reports]
    if window is not None:
        lo, hi = window
        steps = [s for s in steps if lo <= s < hi]
    if not steps:
        raise InvalidArgument("ledger_report needs at least one completed step")
    totals = {c: {"messages": 0, "bytes": 0, "items": 0, "seconds": 0.0} for c in CLASSES}
    per_rank = []
    for rs in world.ranks:
        row = {"rank": rs.rank}
        for c in CLASSES:
            agg = {"messages": 0, "bytes": 0, "items": 0, "seconds": 0.0}
            for s in steps:
                v = rs.ledger.rows[s][c]
                agg["messages"] += v.messages
                agg["bytes"] += v.bytes
                agg["items"] += v.items
                agg["seconds"] += v.seconds
            row[c] = agg
            for k in agg:
                totals[c][k] += agg[k]
        per_rank.append(row)
    step_time = sum(sec for s, _, sec in world.timing if s in set(steps))
    shares = {c: (totals[c]["seconds"] / world.n_ranks) / step_time if step_time > 0 else 0.0
              for c in CLASSES}
    return {"steps": steps, "totals": totals, "share": shares, "per_rank": per_rank,
            "step_seconds": step_time}
