"""Scene construction, case execution and run artifacts."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..cfd import BoundarySpec, DirichletVelocity, NoSlipWall, OutletPressure, to_flat
from ..dem import BodyForce, ContactParams, FluidProps, ParticleSet, load_particles_csv, \
    save_particles_csv
from ..errors import ConfigError
from ..geometry import DomainBox, auto_rank_grid, build_grid, independent_partition, \
    uniform_partition
from ..runtime.ledger import LOCAL, REMOTE, write_ledger_csv, write_timing_csv
from ..runtime.world import PHASES, RunConfig, Scene, World, ledger_report, spawn_world
from .config import CaseConfig

log = logging.getLogger(__name__)

SERIES = ["u_p_x", "u_p_y", "u_p_z", "speed", "accel", "drag_x", "drag_y", "drag_z",
          "drag_mag", "solid_volume", "fluid_accel_l1"]
NORMALIZED = ["speed", "accel", "drag_mag", "solid_volume", "fluid_accel_l1"]
TIMESERIES_HEADER = (["step", "time"] + SERIES + [f"{c}_norm" for c in NORMALIZED]
                     + ["n_particles", "mass_balance", "floored", "tracked_x", "tracked_y",
                        "tracked_z", "tracked_owner", "pressure_iterations"])
FLUID_HEADER = ["cell", "x", "y", "z", "u", "v", "w", "p", "eps"]


# --------------------------------------------------------------------------- scene

def boundary_spec(cfg: CaseConfig) -> BoundarySpec:
    faces = []
    for name in ("x-", "x+", "y-", "y+", "z-", "z+"):
        f = cfg.boundary[name]
        if f[0] == "wall":
            faces.append(NoSlipWall())
        elif f[0] == "inlet":
            faces.append(DirichletVelocity(f[1]))
        else:
            faces.append(OutletPressure(f[1]))
    return BoundarySpec(tuple(faces))


def layered_positions(lo, hi, count: int, d: float, solid_fraction: float, jitter: float,
                      rng: np.random.Generator, up_axis: int = 2) -> np.ndarray:
    """Jittered cubic lattice filled bottom-up along ``up_axis``.

    The lattice pitch ``s`` makes the bed's solid fraction equal
    ``solid_fraction``; jitter is a fraction of the free gap ``s - d``, so
    spheres never overlap.
    """
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    s = d * (math.pi / (6.0 * solid_fraction)) ** (1.0 / 3.0)
    axes = [k for k in range(3) if k != up_axis]
    counts = [int(math.floor((hi[k] - lo[k] - d) / s)) + 1 for k in axes]
    if min(counts) < 1:
        raise ConfigError("invalid value for 'd_p': box too small for one lattice layer")
    per_layer = counts[0] * counts[1]
    layers = -(-count // per_layer)
    top = lo[up_axis] + 0.5 * d + (layers - 1) * s
    if top + 0.5 * d > hi[up_axis]:
        raise ConfigError(f"invalid value for 'count': {count} particles do not fit the box")
    a, b, c = np.meshgrid(np.arange(counts[0]), np.arange(counts[1]), np.arange(layers),
                          indexing="ij")
    idx = np.stack([a.ravel(), b.ravel(), c.ravel()], axis=1)
    idx = idx[np.lexsort((idx[:, 0], idx[:, 1], idx[:, 2]))][:count]
    pos = np.empty((count, 3))
    for j, k in enumerate(axes):
        pos[:, k] = lo[k] + 0.5 * d + idx[:, j] * s
    pos[:, up_axis] = lo[up_axis] + 0.5 * d + idx[:, 2] * s
    gap = s - d
    pos += rng.uniform(-jitter * gap, jitter * gap, size=pos.shape)
    return pos


def build_particles(cfg: CaseConfig, grid) -> ParticleSet:
    rng = np.random.default_rng(cfg.seed)
    lo = np.asarray(grid.domain.min_corner)
    hi = np.asarray(grid.domain.max_corner)
    r = 0.5 * cfg.d_p
    if cfg.layout == "single":
        return ParticleSet.create([0], [cfg.position], [cfg.velocity], cfg.d_p, cfg.rho_p)
    if cfg.layout == "random":
        x = rng.uniform(lo + r, hi - r, size=(cfg.count, 3))
        u = np.broadcast_to(np.asarray(cfg.velocity), (cfg.count, 3))
        return ParticleSet.create(np.arange(cfg.count), x, u, cfg.d_p, cfg.rho_p)
    if cfg.layout == "layered":
        up = int(np.argmax(np.abs(cfg.gravity))) if any(cfg.gravity) else 2
        x = layered_positions(lo, hi, cfg.count, cfg.d_p, cfg.solid_fraction, cfg.jitter, rng, up)
        u = np.broadcast_to(np.asarray(cfg.velocity), (cfg.count, 3))
        return ParticleSet.create(np.arange(cfg.count), x, u, cfg.d_p, cfg.rho_p)
    return load_particles_csv(cfg.particle_file)


def partition_maps(cfg: CaseConfig, grid):
    if cfg.partition == "independent_baseline":
        return independent_partition(grid, cfg.n_ranks, cfg.axis_cfd, cfg.axis_dem)
    rg = auto_rank_grid(grid, cfg.n_ranks) if cfg.rank_grid == "auto" else cfg.rank_grid
    m = uniform_partition(grid, rg)
    return m, m


def build_world(cfg: CaseConfig) -> World:
    grid = build_grid(DomainBox(cfg.min_corner, cfg.max_corner), cfg.n_cells)
    ps = build_particles(cfg, grid)
    fluid = FluidProps(cfg.rho_f, cfg.mu_f, cfg.body_force)
    run = RunConfig(
        dt=cfg.dt, fluid=fluid, bc=boundary_spec(cfg),
        contact=ContactParams(cfg.k_n, cfg.gamma_n, cfg.k_t, cfg.mu_c),
        body=BodyForce(cfg.gravity), dummy=cfg.dummy, subsamples=cfg.subsamples,
        eps_min=cfg.eps_min, boundary_policy=cfg.boundary_policy, particle_walls=cfg.walls,
        tol=cfg.tol, max_iter=cfg.max_iter or None, threads=cfg.threads or None)
    return spawn_world(cfg.n_ranks, partition_maps(cfg, grid),
                       Scene(grid, ps, cfg.initial_velocity), run)


# --------------------------------------------------------------------------- run

@dataclass
class RunResult:
    config: CaseConfig
    out_dir: Path | None
    reports: list
    summary: dict
    world: World


def _series_rows(reports) -> list:
    raw = []
    for r in reports:
        speed = float(np.linalg.norm(r.mean_velocity))
        raw.append([*r.mean_velocity, speed, r.mean_acceleration, *r.drag_total,
                    float(np.linalg.norm(r.drag_total)), r.solid_volume, r.fluid_accel_l1])
    raw = np.asarray(raw, float).reshape(len(reports), len(SERIES))
    cols = [SERIES.index(c) for c in NORMALIZED]
    peak = np.max(np.abs(raw[:, cols]), axis=0) if len(reports) else np.ones(len(cols))
    norm = np.divide(raw[:, cols], peak, out=np.zeros_like(raw[:, cols]), where=peak > 0)
    rows = []
    for i, r in enumerate(reports):
        rows.append([r.step, repr(r.time)] + [repr(float(v)) for v in raw[i]]
                    + [repr(float(v)) for v in norm[i]]
                    + [r.n_particles, repr(float(r.mass_balance)), r.floored,
                       *[repr(float(v)) for v in r.tracked_x], r.tracked_owner,
                       r.pressure_iterations])
    return rows


def crossing_step(reports) -> int | None:
    """First step at which the tracked particle changed owner."""
    for prev, cur in zip(reports, reports[1:]):
        if cur.tracked_owner != prev.tracked_owner:
            return cur.step
    return None


def summarize(world: World, reports, wall: float) -> dict:
    rep = ledger_report(world)
    phase_tot = {p: sum(r.phase_seconds[p] for r in reports) for p in PHASES}
    step_time = sum(phase_tot.values())
    per_step = [{c: r.ledger[c].messages for c in (REMOTE,)} for r in reports]
    return {
        "n_ranks": world.n_ranks,
        "colocated": world.colocated,
        "steps": len(reports),
        "wall_seconds": wall,
        "phase_seconds": phase_tot,
        "phase_share": {p: (v / step_time if step_time > 0 else 0.0) for p, v in phase_tot.items()},
        "ledger_totals": rep["totals"],
        "ledger_time_share": rep["share"],
        "inter_physics_messages_per_step": [d[REMOTE] for d in per_step],
        "max_intra_partition_bytes_per_rank": max(
            row[LOCAL]["bytes"] for row in rep["per_rank"]),
        "crossing_step": crossing_step(reports),
        "floored_cells": int(sum(r.floored for r in reports)),
        "max_mass_balance": float(max((r.mass_balance for r in reports), default=0.0)),
    }


def write_outputs(out: Path, cfg: CaseConfig, world: World, reports, summary: dict,
                  snapshot: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "timeseries.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMESERIES_HEADER)
        w.writerows(_series_rows(reports))
    steps = [r.step for r in reports]
    write_ledger_csv(out / "ledger.csv", [rs.ledger for rs in world.ranks], steps)
    write_timing_csv(out / "timing.csv", [t for t in world.timing if t[0] in set(steps)])
    save_particles_csv(world.particles(), out / "particles.csv")
    if snapshot:
        u, p, eps = world.fluid_arrays()
        uf, pf, ef = to_flat(u), to_flat(p), to_flat(eps)
        xc = world.grid.centroids()
        with open(out / "fluid.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FLUID_HEADER)
            for i in range(pf.size):
                vals = [*xc[i], *uf[:, i], pf[i], ef[i]]
                w.writerow([i] + [repr(float(v)) for v in vals])
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def run_case(cfg: CaseConfig, out_dir=None, progress=None) -> RunResult:
    """Spawn the world, step it ``n_steps`` times and write artifacts to ``out_dir``."""
    t0 = time.perf_counter()
    world = build_world(cfg)
    try:
        reports = world.run(cfg.n_steps, progress)
    finally:
        world.close()
    wall = time.perf_counter() - t0
    summary = summarize(world, reports, wall)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        write_outputs(out, cfg, world, reports, summary, cfg.snapshot)
    return RunResult(cfg, out, reports, summary, world)


# --------------------------------------------------------------------------- comparison

COMPARED = ["u_p_x", "u_p_y", "u_p_z", "drag_x", "drag_y", "drag_z", "solid_volume",
            "fluid_accel_l1", "tracked_x", "tracked_y", "tracked_z", "n_particles"]
# keys allowed to differ between compared runs
FREE_KEYS = {"n_ranks", "rank_grid", "partition", "axis_cfd", "axis_dem", "out_dir", "threads",
             "source", "snapshot"}


def read_timeseries(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    return {h: np.array([float(r[i]) for r in body]) for i, h in enumerate(head)}


def relative_deviation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.divide(np.abs(a - b), scale, out=np.zeros_like(scale), where=scale > 0)


def compare_runs(run_a, run_b, tol_rel: float = 1e-10) -> dict:
    a, b = Path(run_a), Path(run_b)
    ca = json.loads((a / "config.json").read_text())
    cb = json.loads((b / "config.json").read_text())
    diff = sorted(k for k in set(ca) | set(cb) if k not in FREE_KEYS and ca.get(k) != cb.get(k))
    if diff:
        raise ConfigError(f"runs differ in configuration keys {diff}; comparison refused")
    ta = read_timeseries(a / "timeseries.csv")
    tb = read_timeseries(b / "timeseries.csv")
    if len(ta["step"]) != len(tb["step"]):
        raise ConfigError("runs have different step counts; comparison refused")
    crossings = [json.loads((d / "summary.json").read_text()).get("crossing_step") for d in (a, b)]
    cross = next((c for c in crossings if c is not None), None)
    quantities = {}
    for q in COMPARED:
        dev = relative_deviation(ta[q], tb[q])
        entry = {"max_rel": float(dev.max()) if dev.size else 0.0,
                 "worst_step": int(ta["step"][int(np.argmax(dev))]) if dev.size else None}
        if cross is not None:
            entry["at_crossing"] = float(dev[int(np.flatnonzero(ta["step"] == cross)[0])])
        entry["pass"] = entry["max_rel"] <= tol_rel
        quantities[q] = entry
    return {"tol_rel": tol_rel, "crossing_step": cross, "quantities": quantities,
            "pass": all(v["pass"] for v in quantities.values())}
