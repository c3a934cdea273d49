"""Lagrangian particle solver: contacts, drag closure, walls and time integration.

Particles are stored as a structure of arrays (:class:`ParticleSet`) sorted by
global id. Pair forces are accumulated in ``(min id, max id)`` order, which
makes the per-particle sums independent of how the particle set was split
across ranks.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ContactError, FormatError, InvalidArgument, NumericError, PorosityError

KEY_SHIFT = np.int64(1 << 31)


@dataclass
class Particle:
    id: int
    x: np.ndarray
    u: np.ndarray
    d_p: float
    rho_p: float
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phi: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    @property
    def m(self) -> float:
        return self.rho_p * (math.pi / 6.0) * self.d_p ** 3

    @property
    def I(self) -> float:
        return self.m * self.d_p ** 2 / 10.0

    @property
    def A_p(self) -> float:
        return math.pi * self.d_p ** 2 / 4.0


@dataclass
class ParticleSet:
    """Structure-of-arrays particle container; every array has leading length ``n``."""

    id: np.ndarray
    x: np.ndarray
    u: np.ndarray
    omega: np.ndarray
    phi: np.ndarray
    d: np.ndarray
    rho: np.ndarray

    @classmethod
    def empty(cls) -> "ParticleSet":
        return cls(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 3)),
                   np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros(0))

    @classmethod
    def create(cls, ids, x, u=None, d=1.0, rho=1.0, omega=None, phi=None) -> "ParticleSet":
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.size
        x = np.array(x, dtype=float).reshape(n, 3)
        u = np.zeros((n, 3)) if u is None else np.array(u, dtype=float).reshape(n, 3)
        omega = np.zeros((n, 3)) if omega is None else np.array(omega, float).reshape(n, 3)
        if phi is None:
            phi = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        d = np.broadcast_to(np.asarray(d, dtype=float), (n,)).copy()
        rho = np.broadcast_to(np.asarray(rho, dtype=float), (n,)).copy()
        if np.unique(ids).size != n:
            raise InvalidArgument("particle ids must be unique")
        ps = cls(ids, x, u, omega, np.array(phi, float).reshape(n, 4), d, rho)
        return ps.sorted()

    @classmethod
    def from_particles(cls, parts) -> "ParticleSet":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls.create([p.id for p in parts], [p.x for p in parts], [p.u for p in parts],
                          [p.d_p for p in parts], [p.rho_p for p in parts],
                          [p.omega for p in parts], [p.phi for p in parts])

    def __len__(self) -> int:
        return int(self.id.size)

    @property
    def mass(self) -> np.ndarray:
        return self.rho * (math.pi / 6.0) * self.d ** 3

    @property
    def inertia(self) -> np.ndarray:
        return self.mass * self.d ** 2 / 10.0

    @property
    def volume(self) -> np.ndarray:
        return (math.pi / 6.0) * self.d ** 3

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * self.d

    def arrays(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def take(self, idx) -> "ParticleSet":
        return ParticleSet(**{k: v[idx].copy() for k, v in self.arrays().items()})

    def sorted(self) -> "ParticleSet":
        order = np.argsort(self.id, kind="stable")
        if np.all(order == np.arange(len(order))):
            return self
        return self.take(order)

    def copy(self) -> "ParticleSet":
        return self.take(slice(None))

    @staticmethod
    def concat(sets) -> "ParticleSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return ParticleSet.empty()
        merged = ParticleSet(**{k: np.concatenate([getattr(s, k) for s in sets])
                                for k in sets[0].arrays()})
        return merged.sorted()

    def nbytes(self) -> int:
        return sum(v.nbytes for v in self.arrays().values())

    def particle(self, i: int) -> Particle:
        return Particle(int(self.id[i]), self.x[i].copy(), self.u[i].copy(), float(self.d[i]),
                        float(self.rho[i]), self.omega[i].copy(), self.phi[i].copy())


@dataclass(frozen=True)
class ContactParams:
    k_n: float
    gamma_n: float = 0.0
    k_t: float = 0.0
    mu_c: float = 0.0

    def __post_init__(self):
        if not self.k_n > 0:
            raise InvalidArgument("k_n must be > 0")
        if self.gamma_n < 0 or self.k_t < 0 or self.mu_c < 0:
            raise InvalidArgument("gamma_n, k_t and mu_c must be >= 0")


@dataclass(frozen=True)
class BodyForce:
    g: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class ContactHistory:
    """Tangential spring displacement per contact pair, keyed by ``min_id * 2**31 + max_id``."""

    keys: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    xi: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        out = np.zeros((keys.size, 3))
        if self.keys.size and keys.size:
            pos = np.searchsorted(self.keys, keys)
            pos_c = np.minimum(pos, self.keys.size - 1)
            hit = self.keys[pos_c] == keys
            out[hit] = self.xi[pos_c[hit]]
        return out

    def involving(self, ids) -> "ContactHistory":
        ids = np.asarray(ids, dtype=np.int64)
        a, b = self.keys // KEY_SHIFT, self.keys % KEY_SHIFT
        m = np.isin(a, ids) | np.isin(b, ids)
        return ContactHistory(self.keys[m].copy(), self.xi[m].copy())

    def merged(self, other: "ContactHistory") -> "ContactHistory":
        """Union of two histories; entries already present in ``self`` win."""
        if not other.keys.size:
            return self
        new = ~np.isin(other.keys, self.keys)
        keys = np.concatenate([self.keys, other.keys[new]])
        xi = np.concatenate([self.xi, other.xi[new]])
        order = np.argsort(keys, kind="stable")
        return ContactHistory(keys[order], xi[order])

    def restricted(self, ids) -> "ContactHistory":
        """Entries with at least one particle among ``ids``."""
        return self.involving(ids)


def pair_keys(ida, idb) -> np.ndarray:
    return np.asarray(ida, np.int64) * KEY_SHIFT + np.asarray(idb, np.int64)


# --------------------------------------------------------------------------- neighbour search

def pairs_cell_list(x: np.ndarray, ids: np.ndarray, cutoff: float):
    """Candidate pairs ``(a, b)`` (local indices, ``ids[a] < ids[b]``) within ``cutoff``.

    Uniform cell list with edge ``cutoff``; output sorted by ``(ids[a], ids[b])``.
    """
    n = len(ids)
    if n < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    lo = x.min(axis=0)
    c = np.floor((x - lo) / cutoff).astype(np.int64)
    nc = c.max(axis=0) + 1
    key = c[:, 0] + nc[0] * (c[:, 1] + nc[1] * c[:, 2])
    order = np.argsort(key, kind="stable")
    sk = key[order]
    ai, bi = [], []
    for ox in (-1, 0, 1):
        for oy in (-1, 0, 1):
            for oz in (-1, 0, 1):
                cn = c + (ox, oy, oz)
                ok = np.all((cn >= 0) & (cn < nc), axis=1)
                src = np.flatnonzero(ok)
                if not src.size:
                    continue
                cn = cn[ok]
                nk = cn[:, 0] + nc[0] * (cn[:, 1] + nc[1] * cn[:, 2])
                start = np.searchsorted(sk, nk, "left")
                cnt = np.searchsorted(sk, nk, "right") - start
                tot = int(cnt.sum())
                if not tot:
                    continue
                rep_a = np.repeat(src, cnt)
                offs = np.arange(tot) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                rep_b = order[np.repeat(start, cnt) + offs]
                keep = ids[rep_a] < ids[rep_b]
                ai.append(rep_a[keep])
                bi.append(rep_b[keep])
    if not ai:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    a = np.concatenate(ai)
    b = np.concatenate(bi)
    d2 = np.sum((x[b] - x[a]) ** 2, axis=1)
    m = d2 <= cutoff * cutoff
    a, b = a[m], b[m]
    o = np.lexsort((ids[b], ids[a]))
    return a[o], b[o]


def pairs_all(x: np.ndarray, ids: np.ndarray, cutoff: float | None = None):
    """All ``(a, b)`` with ``ids[a] < ids[b]``, sorted by id pair; O(n^2)."""
    order = np.argsort(ids, kind="stable")
    a, b = np.triu_indices(len(ids), k=1)
    a, b = order[a], order[b]
    return a, b


# --------------------------------------------------------------------------- contact law

def pair_contact(xa, xb, ua, ub, wa, wb, ra, rb, xi_old, params: ContactParams, dt: float):
    """Spring-dashpot normal force plus Coulomb-capped tangential spring, per pair.

    Returns ``(force_on_a, torque_on_a, torque_on_b, xi_new)``; the force on b
    is the negative of the force on a. Lever arms end at the middle of the
    overlap so that the pair exerts no net moment about any point.
    """
    dvec = xb - xa
    dist = np.sqrt(np.sum(dvec * dvec, axis=1))
    n = dvec / dist[:, None]
    delta = ra + rb - dist
    la = ra - 0.5 * delta
    lb = rb - 0.5 * delta
    vrel = ua - ub + np.cross(la[:, None] * wa + lb[:, None] * wb, n)
    vn = np.sum(vrel * n, axis=1)
    fn = np.maximum(params.k_n * delta + params.gamma_n * vn, 0.0)
    force = -fn[:, None] * n
    if params.k_t > 0.0:
        vt = vrel - vn[:, None] * n
        xi = xi_old - np.sum(xi_old * n, axis=1)[:, None] * n + vt * dt
        ft = -params.k_t * xi
        ftn = np.sqrt(np.sum(ft * ft, axis=1))
        cap = params.mu_c * fn
        slip = ftn > cap
        if slip.any():
            scale = np.where(slip, cap / np.where(ftn > 0, ftn, 1.0), 1.0)
            ft = ft * scale[:, None]
            xi = np.where(slip[:, None], -ft / params.k_t, xi)
        force = force + ft
        ta = np.cross(la[:, None] * n, ft)
        tb = np.cross(lb[:, None] * n, ft)
    else:
        xi = np.zeros_like(xi_old)
        ta = np.zeros_like(force)
        tb = np.zeros_like(force)
    return force, ta, tb, xi


def accumulate_pairs(n: int, a, b, force, ta, tb):
    """Per-particle sums in pair order (interleaved a, b), matching a scalar loop."""
    F = np.zeros((n, 3))
    T = np.zeros((n, 3))
    if len(a):
        idx = np.stack([a, b], axis=1).ravel()
        np.add.at(F, idx, np.stack([force, -force], axis=1).reshape(-1, 3))
        np.add.at(T, idx, np.stack([ta, tb], axis=1).reshape(-1, 3))
    return F, T


def contact_forces(ps: ParticleSet, params: ContactParams, dt: float = 0.0,
                   history: ContactHistory | None = None, search: str = "cells"):
    """Pairwise contact forces and torques for every particle in ``ps``.

    Returns ``(forces, torques, new_history)``; the new history holds only the
    pairs in contact after this evaluation.
    """
    n = len(ps)
    history = history or ContactHistory()
    if n < 2:
        return np.zeros((n, 3)), np.zeros((n, 3)), ContactHistory()
    cutoff = float(ps.d.max())
    if search == "cells":
        a, b = pairs_cell_list(ps.x, ps.id, cutoff)
    elif search == "brute":
        a, b = pairs_all(ps.x, ps.id)
    else:
        raise InvalidArgument(f"unknown search mode {search!r}")
    r = ps.radius
    dvec = ps.x[b] - ps.x[a]
    dist2 = np.sum(dvec * dvec, axis=1)
    zero = dist2 == 0.0
    if zero.any():
        k = int(np.flatnonzero(zero)[0])
        raise ContactError(
            f"coincident particle centres: ids {int(ps.id[a[k]])} and {int(ps.id[b[k]])}")
    touching = dist2 < (r[a] + r[b]) ** 2
    a, b = a[touching], b[touching]
    keys = pair_keys(ps.id[a], ps.id[b])
    xi_old = history.lookup(keys)
    force, ta, tb, xi = pair_contact(ps.x[a], ps.x[b], ps.u[a], ps.u[b], ps.omega[a],
                                     ps.omega[b], r[a], r[b], xi_old, params, dt)
    F, T = accumulate_pairs(n, a, b, force, ta, tb)
    return F, T, ContactHistory(keys, xi)


def wall_forces(ps: ParticleSet, lo, hi, params: ContactParams, walls=None):
    """Normal spring-dashpot contact with the axis-aligned domain faces.

    ``walls`` is a 6-sequence of booleans in face order x-, x+, y-, y+, z-, z+.
    """
    n = len(ps)
    F = np.zeros((n, 3))
    if not n:
        return F
    r = ps.radius
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    walls = [True] * 6 if walls is None else list(walls)
    for axis in range(3):
        for side, sign in ((0, 1.0), (1, -1.0)):
            if not walls[2 * axis + side]:
                continue
            plane = lo[axis] if side == 0 else hi[axis]
            gap = sign * (ps.x[:, axis] - plane)
            delta = r - gap
            hit = delta > 0
            if not hit.any():
                continue
            vn = -sign * ps.u[:, axis]
            fn = np.maximum(params.k_n * delta + params.gamma_n * vn, 0.0)
            F[:, axis] += np.where(hit, sign * fn, 0.0)
    return F


# --------------------------------------------------------------------------- drag closure

@dataclass(frozen=True)
class FluidProps:
    rho_f: float
    mu_f: float
    body_force: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.rho_f > 0:
            raise InvalidArgument("rho_f must be > 0")
        if self.mu_f < 0:
            raise InvalidArgument("mu_f must be >= 0")

    @property
    def nu(self) -> float:
        return self.mu_f / self.rho_f


RE_STOKES = 1e-10


def drag_beta(slip_mag, eps, d_p, fluid: FluidProps) -> np.ndarray:
    """Di Felice momentum-exchange coefficient (kg/s)."""
    slip_mag = np.asarray(slip_mag, dtype=float)
    eps = np.asarray(eps, dtype=float)
    d_p = np.asarray(d_p, dtype=float)
    if np.any(eps <= 0) or np.any(~np.isfinite(eps)):
        raise PorosityError("porosity must lie in (0, 1]")
    if fluid.mu_f <= 0:
        raise InvalidArgument("drag requires mu_f > 0")
    re = fluid.rho_f * eps * slip_mag * d_p / fluid.mu_f
    stokes = 3.0 * math.pi * fluid.mu_f * d_p * eps
    with np.errstate(divide="ignore", invalid="ignore"):
        safe_re = np.where(re < RE_STOKES, 1.0, re)
        cd = (0.63 + 4.8 / np.sqrt(safe_re)) ** 2
        chi = 3.7 - 0.65 * np.exp(-((1.5 - np.log10(safe_re)) ** 2) / 2.0)
        area = math.pi * d_p ** 2 / 4.0
        beta = 0.5 * cd * fluid.rho_f * area * eps ** 2 * slip_mag * eps ** (-chi)
    return np.where(re < RE_STOKES, stokes, beta)


def drag_force(u_p, u_f_at_p, eps, d_p, fluid: FluidProps):
    """``F = beta (u_f - u_p)``; returns ``(force, beta)``. Vectorised over leading axis."""
    u_p = np.asarray(u_p, dtype=float)
    u_f = np.asarray(u_f_at_p, dtype=float)
    slip = u_f - u_p
    mag = np.sqrt(np.sum(slip * slip, axis=-1))
    beta = drag_beta(mag, eps, d_p, fluid)
    return beta[..., None] * slip, beta


def drag_force_particle(p: Particle, u_f_at_p, eps, fluid: FluidProps):
    F, beta = drag_force(p.u, u_f_at_p, eps, p.d_p, fluid)
    return F, float(beta)


# --------------------------------------------------------------------------- integration

def _quat_mul(q, r):
    w1, x1, y1, z1 = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    w2, x2, y2, z2 = r[:, 0], r[:, 1], r[:, 2], r[:, 3]
    return np.stack([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                     w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                     w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2], axis=1)


def integrate_particles(ps: ParticleSet, forces, torques, dt: float) -> ParticleSet:
    """Symplectic Euler: velocities first, then positions and orientation."""
    if not dt > 0:
        raise InvalidArgument("dt must be > 0")
    forces = np.asarray(forces, dtype=float).reshape(len(ps), 3)
    torques = np.asarray(torques, dtype=float).reshape(len(ps), 3)
    bad = ~np.all(np.isfinite(forces), axis=1) | ~np.all(np.isfinite(torques), axis=1)
    if bad.any():
        raise NumericError(f"non-finite force on particle id {int(ps.id[np.flatnonzero(bad)[0]])}")
    u = ps.u + forces / ps.mass[:, None] * dt
    x = ps.x + u * dt
    omega = ps.omega + torques / ps.inertia[:, None] * dt
    wmag = np.sqrt(np.sum(omega * omega, axis=1))
    half = 0.5 * wmag * dt
    with np.errstate(invalid="ignore", divide="ignore"):
        axis = np.where(wmag[:, None] > 0, omega / wmag[:, None], 0.0)
    rot = np.concatenate([np.cos(half)[:, None], np.sin(half)[:, None] * axis], axis=1)
    phi = _quat_mul(rot, ps.phi)
    phi /= np.sqrt(np.sum(phi * phi, axis=1))[:, None]
    return replace(ps, x=x, u=u, omega=omega, phi=phi)


# --------------------------------------------------------------------------- CSV I/O

CSV_COLUMNS = ["id", "x", "y", "z", "u", "v", "w", "d_p", "rho_p"]


def load_particles_csv(path) -> ParticleSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_COLUMNS:
            raise FormatError(f"{path}: header must be {','.join(CSV_COLUMNS)}")
        rows = [r for r in reader if r]
    if not rows:
        return ParticleSet.empty()
    try:
        ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
        vals = np.array([[float(v) for v in r[1:]] for r in rows])
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed row ({exc})") from None
    if vals.shape[1] != 8:
        raise FormatError(f"{path}: expected {len(CSV_COLUMNS)} columns")
    return ParticleSet.create(ids, vals[:, 0:3], vals[:, 3:6], vals[:, 6], vals[:, 7])


def save_particles_csv(ps: ParticleSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i in range(len(ps)):
            w.writerow([int(ps.id[i]), *(repr(float(v)) for v in ps.x[i]),
                        *(repr(float(v)) for v in ps.u[i]), repr(float(ps.d[i])),
                        repr(float(ps.rho[i]))])
