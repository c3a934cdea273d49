"""Strict INI case configuration.

Every key is declared in ``SCHEMA`` with a parser and an optional default;
unknown keys, missing required keys and ill-typed values raise
:class:`ConfigError` naming the offending key.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError

CASE_IDS = ("boundary_crossing", "dummy_dem", "layered_bed")
LAYOUTS = ("single", "random", "layered", "csv")
PARTITIONS = ("colocated_uniform", "independent_baseline")
REQUIRED = object()


def _float(s):
    return float(s)


def _int(s):
    v = float(s)
    if v != int(v):
        raise ValueError(f"{s!r} is not an integer")
    return int(v)


def _vec3(s):
    parts = s.replace(",", " ").split()
    if len(parts) != 3:
        raise ValueError(f"expected 3 numbers, got {s!r}")
    return tuple(float(p) for p in parts)


def _ivec3(s):
    v = _vec3(s)
    if any(x != int(x) for x in v):
        raise ValueError(f"expected 3 integers, got {s!r}")
    return tuple(int(x) for x in v)


def _bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def _choice(*options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"{s!r} not in {options}")
        return s
    return parse


def _rank_grid(s):
    return "auto" if s.strip() == "auto" else _ivec3(s)


def _face(s):
    """``wall``, ``inlet vx vy vz`` or ``outlet p``."""
    parts = s.split()
    if not parts:
        raise ValueError("empty boundary condition")
    kind = parts[0]
    if kind == "wall" and len(parts) == 1:
        return ("wall",)
    if kind == "inlet" and len(parts) == 4:
        return ("inlet", tuple(float(p) for p in parts[1:]))
    if kind == "outlet" and len(parts) == 2:
        return ("outlet", float(parts[1]))
    raise ValueError(f"bad boundary condition {s!r}")


def _faces(s):
    names = ("x-", "x+", "y-", "y+", "z-", "z+")
    t = s.strip()
    if t == "all":
        return (True,) * 6
    if t == "none":
        return (False,) * 6
    chosen = t.replace(",", " ").split()
    for c in chosen:
        if c not in names:
            raise ValueError(f"unknown face {c!r}")
    return tuple(n in chosen for n in names)


def _str(s):
    return s.strip()


# section -> key -> (parser, default)
SCHEMA = {
    "case": {
        "id": (_choice(*CASE_IDS), REQUIRED),
        "seed": (_int, 0),
    },
    "grid": {
        "min_corner": (_vec3, (0.0, 0.0, 0.0)),
        "max_corner": (_vec3, REQUIRED),
        "n_cells": (_ivec3, REQUIRED),
        "cubic": (_bool, False),
    },
    "particles": {
        "layout": (_choice(*LAYOUTS), REQUIRED),
        "count": (_int, 1),
        "d_p": (_float, REQUIRED),
        "rho_p": (_float, REQUIRED),
        "position": (_vec3, None),
        "velocity": (_vec3, (0.0, 0.0, 0.0)),
        "solid_fraction": (_float, 0.4),
        "jitter": (_float, 0.25),
        "file": (_str, None),
    },
    "fluid": {
        "rho_f": (_float, REQUIRED),
        "mu_f": (_float, REQUIRED),
        "body_force": (_vec3, (0.0, 0.0, 0.0)),
        "initial_velocity": (_vec3, (0.0, 0.0, 0.0)),
    },
    "boundary": {f: (_face, ("wall",)) for f in ("x-", "x+", "y-", "y+", "z-", "z+")},
    "dem": {
        "k_n": (_float, REQUIRED),
        "gamma_n": (_float, 0.0),
        "k_t": (_float, 0.0),
        "mu_c": (_float, 0.0),
        "gravity": (_vec3, (0.0, 0.0, 0.0)),
        "boundary_policy": (_choice("reflect", "remove"), "reflect"),
        "walls": (_faces, (True,) * 6),
    },
    "cfd": {
        "tol": (_float, 1e-10),
        "max_iter": (_int, 0),
        "subsamples": (_int, 2),
        "eps_min": (_float, 0.3),
    },
    "run": {
        "dt": (_float, REQUIRED),
        "n_steps": (_int, REQUIRED),
        "n_ranks": (_int, 1),
        "partition": (_choice(*PARTITIONS), "colocated_uniform"),
        "rank_grid": (_rank_grid, "auto"),
        "axis_cfd": (_int, 0),
        "axis_dem": (_int, 1),
        "dummy": (_bool, False),
        "threads": (_int, 0),
    },
    "output": {
        "dir": (_str, "runs/out"),
        "snapshot": (_bool, False),
    },
}


@dataclass
class CaseConfig:
    """Flat view of a case file; names are ``<section>_<key>`` minus obvious prefixes."""

    case_id: str
    seed: int
    min_corner: tuple
    max_corner: tuple
    n_cells: tuple
    cubic: bool
    layout: str
    count: int
    d_p: float
    rho_p: float
    position: tuple | None
    velocity: tuple
    solid_fraction: float
    jitter: float
    particle_file: str | None
    rho_f: float
    mu_f: float
    body_force: tuple
    initial_velocity: tuple
    boundary: dict
    k_n: float
    gamma_n: float
    k_t: float
    mu_c: float
    gravity: tuple
    boundary_policy: str
    walls: tuple
    tol: float
    max_iter: int
    subsamples: int
    eps_min: float
    dt: float
    n_steps: int
    n_ranks: int
    partition: str
    rank_grid: object
    axis_cfd: int
    axis_dem: int
    dummy: bool
    threads: int
    out_dir: str
    snapshot: bool
    source: str | None = None

    def replace(self, **kw) -> "CaseConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["boundary"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.boundary.items()}
        return d


RENAME = {("case", "id"): "case_id", ("particles", "file"): "particle_file",
          ("output", "dir"): "out_dir"}


def parse_values(values: dict, source: str | None = None) -> CaseConfig:
    """Build a :class:`CaseConfig` from ``{section: {key: text}}``."""
    for sec in values:
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
    flat = {}
    boundary = {}
    for sec, keys in SCHEMA.items():
        given = values.get(sec, {})
        for key in given:
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
        for key, (parse, default) in keys.items():
            if key in given:
                try:
                    val = parse(given[key])
                except ValueError as exc:
                    raise ConfigError(f"invalid value for {key!r} in [{sec}]: {exc}") from None
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {key!r} in section [{sec}]")
            else:
                val = default
            if sec == "boundary":
                boundary[key] = val
            else:
                flat[RENAME.get((sec, key), key)] = val
    cfg = CaseConfig(boundary=boundary, source=source, **flat)
    validate(cfg)
    return cfg


def validate(cfg: CaseConfig) -> None:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"invalid value for {key!r}: {msg}")

    need(cfg.dt > 0, "dt", "must be > 0")
    need(cfg.n_steps >= 1, "n_steps", "must be >= 1")
    need(cfg.n_ranks >= 1, "n_ranks", "must be >= 1")
    need(all(c >= 1 for c in cfg.n_cells), "n_cells", "counts must be >= 1")
    need(all(cfg.max_corner[k] > cfg.min_corner[k] for k in range(3)), "max_corner",
         "must exceed min_corner on every axis")
    need(cfg.d_p > 0, "d_p", "must be > 0")
    need(cfg.rho_p > 0, "rho_p", "must be > 0")
    need(cfg.rho_f > 0, "rho_f", "must be > 0")
    need(cfg.mu_f >= 0, "mu_f", "must be >= 0")
    need(cfg.count >= 0, "count", "must be >= 0")
    need(cfg.k_n > 0, "k_n", "must be > 0")
    need(min(cfg.gamma_n, cfg.k_t, cfg.mu_c) >= 0, "gamma_n", "damping, k_t and mu_c must be >= 0")
    need(cfg.tol > 0, "tol", "must be > 0")
    need(cfg.max_iter >= 0, "max_iter", "must be >= 0 (0 selects the default)")
    need(cfg.subsamples >= 1, "subsamples", "must be >= 1")
    need(0 < cfg.eps_min < 1, "eps_min", "must lie in (0, 1)")
    need(0 < cfg.solid_fraction < 0.74, "solid_fraction", "must lie in (0, 0.74)")
    need(0 <= cfg.jitter < 0.5, "jitter", "must lie in [0, 0.5)")
    need(cfg.axis_cfd in (0, 1, 2), "axis_cfd", "must be 0, 1 or 2")
    need(cfg.axis_dem in (0, 1, 2), "axis_dem", "must be 0, 1 or 2")
    need(cfg.threads >= 0, "threads", "must be >= 0")
    if cfg.layout == "single":
        need(cfg.position is not None, "position", "required for the single layout")
    if cfg.layout == "csv":
        need(cfg.particle_file is not None, "file", "required for the csv layout")
    if cfg.cubic:
        ext = [cfg.max_corner[k] - cfg.min_corner[k] for k in range(3)]
        h = [ext[k] / cfg.n_cells[k] for k in range(3)]
        need(max(h) - min(h) <= 1e-12 * max(h), "n_cells", "cells are not cubic")
    if cfg.rank_grid != "auto":
        rg = cfg.rank_grid
        need(rg[0] * rg[1] * rg[2] == cfg.n_ranks, "rank_grid", "product must equal n_ranks")


def parse_config(path) -> CaseConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values = {sec: dict(cp[sec]) for sec in cp.sections()}
    cfg = parse_values(values, source=str(path))
    if cfg.particle_file and not Path(cfg.particle_file).is_absolute():
        cfg = cfg.replace(particle_file=str(path.parent / cfg.particle_file))
    return cfg
