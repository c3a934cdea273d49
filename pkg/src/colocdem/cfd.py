"""Porosity-weighted incompressible flow on a structured collocated grid.

One step is a projection scheme:

1. explicit predictor with upwind advection of ``eps u u``, central
   ``eps``-weighted viscous stress (including the transposed gradient), body
   force and the ``u d(eps)/dt`` term, followed by the semi-implicit particle
   drag relaxation;
2. a variable-coefficient pressure Poisson solve (Jacobi-preconditioned CG)
   enforcing ``div(eps u) = d(eps)/dt`` on face fluxes;
3. a corrector on face velocities (compact gradient) and cell velocities
   (central gradient).

All solver code is written as generators over a communicator so the same
arithmetic runs on a single block or on one block per rank. Pressure is
kinematic (m^2/s^2).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .dem import FluidProps
from .errors import InvalidArgument, SolverError, TimestepError
from .geometry import GridSpec

log = logging.getLogger(__name__)

FACE_NAMES = ("x-", "x+", "y-", "y+", "z-", "z+")


# --------------------------------------------------------------------------- boundary conditions

@dataclass(frozen=True)
class DirichletVelocity:
    value: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind = "dirichlet_velocity"


@dataclass(frozen=True)
class NoSlipWall:
    kind = "no_slip_wall"


@dataclass(frozen=True)
class OutletPressure:
    value: float = 0.0
    kind = "outlet_fixed_pressure"


@dataclass(frozen=True)
class BoundarySpec:
    """One condition per face, in order x-, x+, y-, y+, z-, z+."""

    faces: tuple

    def __post_init__(self):
        faces = tuple(self.faces)
        if len(faces) != 6:
            raise InvalidArgument("BoundarySpec needs exactly one condition per domain face")
        for f in faces:
            if not isinstance(f, (DirichletVelocity, NoSlipWall, OutletPressure)):
                raise InvalidArgument(f"unknown boundary condition {f!r}")
        object.__setattr__(self, "faces", faces)

    @classmethod
    def closed(cls) -> "BoundarySpec":
        return cls((NoSlipWall(),) * 6)

    @classmethod
    def channel(cls, inflow, axis: int = 0, outlet_pressure: float = 0.0) -> "BoundarySpec":
        faces = [NoSlipWall()] * 6
        faces[2 * axis] = DirichletVelocity(tuple(float(v) for v in inflow))
        faces[2 * axis + 1] = OutletPressure(float(outlet_pressure))
        return cls(tuple(faces))

    def face(self, axis: int, side: int):
        return self.faces[2 * axis + side]

    @property
    def has_pressure_reference(self) -> bool:
        return any(isinstance(f, OutletPressure) for f in self.faces)


# --------------------------------------------------------------------------- blocks and fields

@dataclass(frozen=True)
class Block:
    """Owned index box ``[lo, lo + shape)`` of the global grid."""

    grid: GridSpec
    lo: tuple[int, int, int]
    shape: tuple[int, int, int]

    @classmethod
    def whole(cls, grid: GridSpec) -> "Block":
        return cls(grid, (0, 0, 0), tuple(grid.n_cells))

    def at_boundary(self, axis: int, side: int) -> bool:
        if side == 0:
            return self.lo[axis] == 0
        return self.lo[axis] + self.shape[axis] == self.grid.n_cells[axis]

    @property
    def padded_shape(self) -> tuple[int, int, int]:
        return tuple(s + 2 for s in self.shape)

    def global_ijk(self) -> np.ndarray:
        """Global (i, j, k) of owned cells, shape (nx, ny, nz, 3)."""
        r = [np.arange(self.lo[k], self.lo[k] + self.shape[k]) for k in range(3)]
        return np.stack(np.meshgrid(*r, indexing="ij"), axis=-1)

    def global_ids(self) -> np.ndarray:
        return self.grid.ravel(self.global_ijk())

    def centroids(self) -> np.ndarray:
        return self.grid.lo + (self.global_ijk() + 0.5) * self.grid.h

    def local_padded(self, ijk) -> np.ndarray:
        """Padded local index of global cell coordinates."""
        return np.asarray(ijk) - np.asarray(self.lo) + 1

    def contains_padded(self, ijk) -> np.ndarray:
        loc = self.local_padded(ijk)
        return np.all((loc >= 0) & (loc < np.asarray(self.padded_shape)), axis=-1)


I = (slice(1, -1),) * 3


def interior(a: np.ndarray) -> np.ndarray:
    return a[(...,) + I]


def shifted(a: np.ndarray, axis: int, off: int) -> np.ndarray:
    """Interior view of a padded array shifted by ``off`` cells along ``axis``."""
    sl = [slice(1, -1)] * 3
    sl[axis] = slice(1 + off, a.shape[a.ndim - 3 + axis] - 1 + off)
    return a[(...,) + tuple(sl)]


def face_pair(a: np.ndarray, axis: int):
    """Left and right cell values at the ``n+1`` faces of the owned block along ``axis``."""
    sl_l = [slice(1, -1)] * 3
    sl_r = [slice(1, -1)] * 3
    sl_l[axis] = slice(0, -1)
    sl_r[axis] = slice(1, None)
    return a[(...,) + tuple(sl_l)], a[(...,) + tuple(sl_r)]


def face_slice(axis: int, idx) -> tuple:
    sl = [slice(None)] * 3
    sl[axis] = idx
    return (...,) + tuple(sl)


def face_diff(f: np.ndarray, axis: int) -> np.ndarray:
    """Difference of face values ``f[i+1] - f[i]`` along ``axis`` (per cell)."""
    return f[face_slice(axis, slice(1, None))] - f[face_slice(axis, slice(None, -1))]


def pad(a: np.ndarray) -> np.ndarray:
    lead = a.shape[:-3]
    out = np.zeros(lead + tuple(s + 2 for s in a.shape[-3:]))
    out[(...,) + I] = a
    return out


def to_flat(a: np.ndarray) -> np.ndarray:
    """Interior array ``[..., i, j, k]`` to global ordering ``i + nx (j + ny k)``."""
    lead = a.shape[:-3]
    moved = np.moveaxis(a, (-3, -2, -1), (-1, -2, -3))
    return moved.reshape(lead + (-1,))


def from_flat(f: np.ndarray, shape) -> np.ndarray:
    nx, ny, nz = shape
    lead = f.shape[:-1]
    return np.moveaxis(f.reshape(lead + (nz, ny, nx)), (-1, -2, -3), (-3, -2, -1)).copy()


@dataclass
class FluidField:
    """Block-local fluid state with a one-cell ghost layer.

    ``u_pad`` has shape (3, nx+2, ny+2, nz+2); ``p_pad`` and ``eps_pad`` are
    padded scalars; ``eps_prev`` is interior only. ``faces[a]`` holds the
    normal velocity on the ``n_a + 1`` faces along axis ``a`` after the last
    projection (``None`` before the first one).
    """

    block: Block
    u_pad: np.ndarray
    p_pad: np.ndarray
    eps_pad: np.ndarray
    eps_prev: np.ndarray
    faces: list | None = None

    @classmethod
    def create(cls, grid: GridSpec, u=None, p=None, eps=None, eps_prev=None,
               block: Block | None = None) -> "FluidField":
        block = block or Block.whole(grid)
        shape = block.shape
        u_arr = np.zeros((3,) + shape)
        if u is not None:
            u = np.asarray(u, float)
            u_arr[...] = u.reshape(3, 1, 1, 1) if u.size == 3 else u.reshape((3,) + shape)
        p_arr = np.zeros(shape) if p is None else np.broadcast_to(np.asarray(p, float), shape).copy()
        e_arr = np.ones(shape) if eps is None else np.broadcast_to(np.asarray(eps, float), shape).copy()
        ep = e_arr.copy() if eps_prev is None else np.broadcast_to(
            np.asarray(eps_prev, float), shape).copy()
        return cls(block, pad(u_arr), pad(p_arr), pad(e_arr), ep)

    @property
    def grid(self) -> GridSpec:
        return self.block.grid

    @property
    def u(self) -> np.ndarray:
        return interior(self.u_pad)

    @property
    def p(self) -> np.ndarray:
        return interior(self.p_pad)

    @property
    def eps(self) -> np.ndarray:
        return interior(self.eps_pad)

    def copy(self) -> "FluidField":
        return FluidField(self.block, self.u_pad.copy(), self.p_pad.copy(), self.eps_pad.copy(),
                          self.eps_prev.copy(),
                          None if self.faces is None else [f.copy() for f in self.faces])

    def with_porosity(self, eps_new) -> "FluidField":
        """Roll porosity time levels: current eps becomes eps_prev."""
        out = self.copy()
        out.eps_prev = self.eps.copy()
        out.eps_pad[I] = eps_new
        return out


@dataclass
class FpiSource:
    """Per-cell particle momentum source.

    ``explicit`` is the slip part ``sum beta (u_p - u_f) / (rho_f V eps)`` (m/s^2),
    ``implicit`` the relaxation rate ``B = sum beta / (rho_f V eps)`` (1/s).
    The predictor applies ``u* = u~ + dt explicit / (1 + dt B)``, which equals
    ``(u~ + dt (A u_ref)) / (1 + dt B)`` with ``A u_ref = explicit + B u~``.
    """

    explicit: np.ndarray
    implicit: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "FpiSource":
        return cls(np.zeros((3,) + tuple(shape)), np.zeros(tuple(shape)))

    def __post_init__(self):
        if np.any(self.implicit < 0):
            raise InvalidArgument("implicit drag coefficient must be >= 0")


# --------------------------------------------------------------------------- communicators

def ordered_sum(grid_total: int, parts) -> float:
    """Sum contributions ``(global_ids, values)`` in global cell order.

    The result is independent of how the cells are split among the parts.
    """
    buf = np.zeros(grid_total)
    for gids, vals in parts:
        buf[gids] = vals
    return float(np.sum(buf))


class LocalComm:
    """Single-block communicator: no neighbours, reductions over one part."""

    n_ranks = 1

    def __init__(self, block: Block):
        self.block = block
        self._gids = to_flat(block.global_ids())

    def halo(self, arrays, tag="cfd"):
        return
        yield  # noqa: unreachable - makes this a generator

    def allreduce(self, items):
        out = []
        for op, arr in items:
            flat = to_flat(arr)
            if op == "sum":
                out.append(ordered_sum(self.block.grid.total, [(self._gids, flat)]))
            elif op == "max":
                out.append(float(np.max(flat)) if flat.size else -math.inf)
            else:
                raise InvalidArgument(op)
        return out
        yield  # noqa: unreachable


def drive(gen):
    """Run a communicator generator that never needs to wait."""
    try:
        while True:
            next(gen)
    except StopIteration as stop:
        return stop.value


# --------------------------------------------------------------------------- ghost filling

def apply_velocity_bc(u_pad: np.ndarray, block: Block, bc: BoundarySpec) -> None:
    for axis in range(3):
        for side in (0, 1):
            if not block.at_boundary(axis, side):
                continue
            g = 0 if side == 0 else -1
            i = 1 if side == 0 else -2
            gs, is_ = face_slice_pad(axis, g), face_slice_pad(axis, i)
            cond = bc.face(axis, side)
            if isinstance(cond, DirichletVelocity):
                v = np.asarray(cond.value, float).reshape(3, 1, 1)
                u_pad[gs] = 2.0 * v - u_pad[is_]
            elif isinstance(cond, NoSlipWall):
                u_pad[gs] = -u_pad[is_]
            else:
                u_pad[gs] = u_pad[is_]


def apply_pressure_bc(p_pad: np.ndarray, block: Block, bc: BoundarySpec) -> None:
    for axis in range(3):
        for side in (0, 1):
            if not block.at_boundary(axis, side):
                continue
            g = 0 if side == 0 else -1
            i = 1 if side == 0 else -2
            gs, is_ = face_slice_pad(axis, g), face_slice_pad(axis, i)
            cond = bc.face(axis, side)
            if isinstance(cond, OutletPressure):
                p_pad[gs] = 2.0 * cond.value - p_pad[is_]
            else:
                p_pad[gs] = p_pad[is_]


def apply_neumann(a_pad: np.ndarray, block: Block) -> None:
    for axis in range(3):
        for side in (0, 1):
            if block.at_boundary(axis, side):
                g = 0 if side == 0 else -1
                i = 1 if side == 0 else -2
                a_pad[face_slice_pad(axis, g)] = a_pad[face_slice_pad(axis, i)]


def face_slice_pad(axis: int, idx: int) -> tuple:
    sl = [slice(None)] * 3
    sl[axis] = idx
    return (...,) + tuple(sl)


def apply_all_bc(fld: FluidField, bc: BoundarySpec) -> None:
    apply_velocity_bc(fld.u_pad, fld.block, bc)
    apply_pressure_bc(fld.p_pad, fld.block, bc)
    apply_neumann(fld.eps_pad, fld.block)


# --------------------------------------------------------------------------- discrete operators

def _boundary_override(vals: np.ndarray, axis: int, block: Block, bc: BoundarySpec,
                       cell_l: np.ndarray, cell_r: np.ndarray, normal_only: bool):
    """Replace face values on domain-boundary faces by their boundary-condition value."""
    for side in (0, 1):
        if not block.at_boundary(axis, side):
            continue
        f = 0 if side == 0 else -1
        cond = bc.face(axis, side)
        inner = cell_r if side == 0 else cell_l
        sl = face_slice(axis, f)
        if isinstance(cond, DirichletVelocity):
            v = np.asarray(cond.value, float)
            if normal_only:
                vals[sl] = v[axis]
            else:
                vals[sl] = v.reshape(3, 1, 1)
        elif isinstance(cond, NoSlipWall):
            vals[sl] = 0.0
        else:
            vals[sl] = inner[sl]
    return vals


def predicted_face_velocity(u_pad: np.ndarray, axis: int, block: Block, bc: BoundarySpec):
    """Linear interpolation of the normal velocity to faces, boundary faces from the BC."""
    ul, ur = face_pair(u_pad[axis], axis)
    uf = 0.5 * (ul + ur)
    return _boundary_override(uf, axis, block, bc, ul, ur, normal_only=True)


def face_eps(eps_pad: np.ndarray, axis: int) -> np.ndarray:
    el, er = face_pair(eps_pad, axis)
    return 0.5 * (el + er)


def explicit_rhs(fld: FluidField, props: FluidProps, bc: BoundarySpec, dt: float) -> np.ndarray:
    """Explicit acceleration (3, nx, ny, nz) excluding pressure and particle drag."""
    blk = fld.block
    h = blk.grid.h
    vol = float(np.prod(h))
    nu = props.nu
    u_pad, eps_pad = fld.u_pad, fld.eps_pad
    eps = fld.eps
    adv = np.zeros((3,) + blk.shape)
    diff = np.zeros((3,) + blk.shape)
    for a in range(3):
        area = vol / h[a]
        ef = face_eps(eps_pad, a)
        if fld.faces is not None:
            uf = fld.faces[a]
        else:
            uf = predicted_face_velocity(u_pad, a, blk, bc)
        flux = ef * uf * area
        ul, ur = face_pair(u_pad, a)
        phi = np.where(flux > 0, ul, ur)
        phi = _boundary_override(phi, a, blk, bc, ul, ur, normal_only=False)
        adv += face_diff(flux * phi, a)
        if nu > 0:
            grad_n = (ur - ul) / h[a]
            trans = np.empty_like(grad_n)
            for i in range(3):
                if i == a:
                    trans[i] = grad_n[a]
                else:
                    q = u_pad[a]
                    gl, gr = _tangential_grad_pair(q, a, i, h[i])
                    trans[i] = 0.5 * (gl + gr)
            fluxd = (nu * ef * area) * (grad_n + trans)
            diff += face_diff(fluxd, a)
    s = (eps - fld.eps_prev) / dt
    g = np.asarray(props.body_force, float).reshape(3, 1, 1, 1)
    return (-adv + diff) / (eps * vol) - fld.u * (s / eps) + g


def _tangential_grad_pair(q: np.ndarray, a: int, i: int, hi: float):
    """Central derivative along ``i`` of ``q`` in the cells left/right of faces normal to ``a``."""
    # cells spanning faces along a (0..n_a+1), interior along the third axis, and
    # interior along i shifted by +-1.
    def view(off_i):
        sl = [slice(1, -1)] * 3
        sl[i] = slice(1 + off_i, q.shape[i] - 1 + off_i)
        sl[a] = slice(None)
        return q[tuple(sl)]
    g = (view(1) - view(-1)) / (2.0 * hi)
    sl_l = [slice(None)] * 3
    sl_r = [slice(None)] * 3
    sl_l[a] = slice(0, -1)
    sl_r[a] = slice(1, None)
    return g[tuple(sl_l)], g[tuple(sl_r)]


@dataclass
class PoissonOperator:
    """Face coefficients of ``-sum a_f (p_nb - p_P)`` on an owned block."""

    block: Block
    diag: np.ndarray
    off: list  # [(axis, off, coeff array)]
    dirichlet_rhs: np.ndarray
    singular: bool

    @classmethod
    def build(cls, eps_pad: np.ndarray, block: Block, bc: BoundarySpec) -> "PoissonOperator":
        h = block.grid.h
        vol = float(np.prod(h))
        diag = np.zeros(block.shape)
        drhs = np.zeros(block.shape)
        off = []
        for a in range(3):
            area = vol / h[a]
            coef = face_eps(eps_pad, a) * area / h[a]
            for side in (0, 1):
                c = coef[face_slice(a, slice(0, -1) if side == 0 else slice(1, None))].copy()
                if block.at_boundary(a, side):
                    edge = face_slice(a, 0 if side == 0 else -1)
                    cond = bc.face(a, side)
                    if isinstance(cond, OutletPressure):
                        cd = 2.0 * c[edge]
                        diag[edge] += cd
                        drhs[edge] += cd * cond.value
                    c[edge] = 0.0
                diag += c
                off.append((a, -1 if side == 0 else 1, c))
        return cls(block, diag, off, drhs, not bc.has_pressure_reference)

    def apply(self, x_pad: np.ndarray) -> np.ndarray:
        y = self.diag * interior(x_pad)
        for a, o, c in self.off:
            y = y - c * shifted(x_pad, a, o)
        return y


def pcg_gen(op: PoissonOperator, b: np.ndarray, x0: np.ndarray, comm, tol: float,
            max_iter: int, tag="cfd"):
    """Jacobi-preconditioned CG; generator returning ``(x_pad, iterations, residual)``.

    Convergence: ``max|r| <= tol * max|b|``. Every inner product is a
    global-order reduction, so the iterates do not depend on the decomposition.
    """
    blk = op.block
    x_pad = pad(x0)
    if op.singular:
        (bs, n_tot) = yield from comm.allreduce([("sum", b), ("sum", np.ones_like(b))])
        b = b - bs / n_tot
    yield from comm.halo([x_pad], tag)
    r = b - op.apply(x_pad)
    inv_d = np.where(op.diag > 0, 1.0 / np.where(op.diag > 0, op.diag, 1.0), 0.0)
    z = r * inv_d
    bmax, rmax, rz = yield from comm.allreduce([("max", np.abs(b)), ("max", np.abs(r)),
                                               ("sum", r * z)])
    if bmax == 0.0:
        return pad(np.zeros(blk.shape)), 0, 0.0
    target = tol * bmax
    d_pad = pad(z)
    it = 0
    while rmax > target:
        if it >= max_iter:
            raise SolverError(
                f"pressure solve did not converge in {max_iter} iterations "
                f"(relative residual {rmax / bmax:.3e})", residual=rmax / bmax)
        yield from comm.halo([d_pad], tag)
        q = op.apply(d_pad)
        (dq,) = yield from comm.allreduce([("sum", interior(d_pad) * q)])
        alpha = rz / dq
        x_pad[I] += alpha * interior(d_pad)
        r = r - alpha * q
        z = r * inv_d
        rmax, rz_new = yield from comm.allreduce([("max", np.abs(r)), ("sum", r * z)])
        d_pad[I] = z + (rz_new / rz) * interior(d_pad)
        rz = rz_new
        it += 1
    if op.singular:
        (ps, n_tot) = yield from comm.allreduce([("sum", interior(x_pad)),
                                                ("sum", np.ones(blk.shape))])
        x_pad[I] -= ps / n_tot
    return x_pad, it, rmax / bmax


def default_max_iter(grid: GridSpec) -> int:
    return max(50, int(10 * grid.total ** (2.0 / 3.0)))


# --------------------------------------------------------------------------- step

def check_timestep(fld: FluidField, props: FluidProps, bc: BoundarySpec, dt: float, comm):
    h = fld.grid.h
    speeds = [np.abs(fld.u[a]) * dt / h[a] for a in range(3)]
    local = np.maximum(np.maximum(speeds[0], speeds[1]), speeds[2])
    (cfl,) = yield from comm.allreduce([("max", local)])
    for f in bc.faces:
        if isinstance(f, DirichletVelocity):
            cfl = max(cfl, max(abs(f.value[a]) * dt / h[a] for a in range(3)))
    if cfl > 0.5:
        raise TimestepError(f"advective CFL {cfl:.3f} exceeds 0.5 at dt={dt:g}")
    dnum = props.nu * dt * float(np.sum(1.0 / h ** 2))
    if dnum > 0.5:
        raise TimestepError(f"viscous diffusion number {dnum:.3f} exceeds 0.5 at dt={dt:g}")
    return cfl


@dataclass
class StepInfo:
    iterations: int
    residual: float
    cfl: float


def project_gen(fld: FluidField, ustar: np.ndarray, bc: BoundarySpec, dt: float, comm,
                tol: float, max_iter: int, x0=None):
    """Pressure projection of a predicted velocity. Generator returning ``(field, info)``."""
    blk = fld.block
    h = blk.grid.h
    vol = float(np.prod(h))
    us_pad = pad(ustar)
    yield from comm.halo([us_pad], "cfd")
    s = (fld.eps - fld.eps_prev) / dt
    ut_faces = []
    net = np.zeros(blk.shape)
    for a in range(3):
        area = vol / h[a]
        uf = predicted_face_velocity(us_pad, a, blk, bc)
        ut_faces.append(uf)
        net += face_diff(face_eps(fld.eps_pad, a) * area * uf, a)
    op = PoissonOperator.build(fld.eps_pad, blk, bc)
    b = -(net - s * vol) / dt + op.dirichlet_rhs
    x0 = fld.p if x0 is None else x0
    p_pad, iters, res = yield from pcg_gen(op, b, x0, comm, tol, max_iter)
    yield from comm.halo([p_pad], "cfd")
    apply_pressure_bc(p_pad, blk, bc)
    faces = []
    for a in range(3):
        pl, pr = face_pair(p_pad, a)
        grad = (pr - pl) / h[a]
        for side in (0, 1):
            if blk.at_boundary(a, side):
                sl = face_slice(a, 0 if side == 0 else -1)
                if isinstance(bc.face(a, side), OutletPressure):
                    # (p_ghost - p_P)/h with p_ghost = 2 p_b - p_P is (p_b - p_P)/(h/2)
                    pass
                else:
                    grad[sl] = 0.0
        faces.append(ut_faces[a] - dt * grad)
    u_new = ustar.copy()
    for a in range(3):
        u_new[a] -= dt * (shifted(p_pad, a, 1) - shifted(p_pad, a, -1)) / (2.0 * h[a])
    out = FluidField(blk, pad(u_new), p_pad, fld.eps_pad.copy(), fld.eps_prev.copy(), faces)
    yield from comm.halo([out.u_pad], "cfd")
    apply_velocity_bc(out.u_pad, blk, bc)
    return out, StepInfo(iters, res, 0.0)


def advance_fluid_gen(fld: FluidField, props: FluidProps, bc: BoundarySpec, fpi: FpiSource | None,
                      dt: float, comm, tol: float = 1e-8, max_iter: int | None = None):
    """One projection step on a block; generator returning ``(field, StepInfo)``.

    Ghost layers of ``fld`` must be coherent on entry; boundary ghosts are
    refreshed here.
    """
    if not dt > 0:
        raise InvalidArgument("dt must be > 0")
    blk = fld.block
    max_iter = max_iter or default_max_iter(blk.grid)
    fld = fld.copy()
    apply_all_bc(fld, bc)
    cfl = yield from check_timestep(fld, props, bc, dt, comm)
    utilde = fld.u + dt * explicit_rhs(fld, props, bc, dt)
    if fpi is not None:
        ustar = utilde + dt * fpi.explicit / (1.0 + dt * fpi.implicit)
    else:
        ustar = utilde
    out, info = yield from project_gen(fld, ustar, bc, dt, comm, tol, max_iter)
    info.cfl = cfl
    return out, info


def advance_fluid(fld: FluidField, props: FluidProps, bc: BoundarySpec, fpi: FpiSource | None,
                  dt: float, tol: float = 1e-8, max_iter: int | None = None) -> FluidField:
    out, _ = drive(advance_fluid_gen(fld, props, bc, fpi, dt, LocalComm(fld.block), tol, max_iter))
    return out


def solve_pressure_poisson(div_target, eps, bc: BoundarySpec, grid: GridSpec, tol: float = 1e-8,
                           max_iter: int | None = None) -> np.ndarray:
    """Solve ``div(eps grad p) = div_target`` (per cell, shape (nx, ny, nz)).

    Faces with an outlet condition carry ``p = value``; all others are
    zero-gradient. Without any outlet the solution has zero mean.
    """
    blk = Block.whole(grid)
    eps_pad = pad(np.broadcast_to(np.asarray(eps, float), blk.shape).copy())
    apply_neumann(eps_pad, blk)
    op = PoissonOperator.build(eps_pad, blk, bc)
    b = -np.asarray(div_target, float).reshape(blk.shape) * grid.cell_volume + op.dirichlet_rhs
    x_pad, _, _ = drive(pcg_gen(op, b, np.zeros(blk.shape), LocalComm(blk), tol,
                                max_iter or default_max_iter(grid)))
    return interior(x_pad).copy()


def face_velocities(fld: FluidField, bc: BoundarySpec | None = None) -> list:
    """Stored face velocities, or a linear reconstruction if none exist yet."""
    if fld.faces is not None:
        return fld.faces
    out = []
    for a in range(3):
        ul, ur = face_pair(fld.u_pad[a], a)
        uf = 0.5 * (ul + ur)
        if bc is not None:
            uf = _boundary_override(uf, a, fld.block, bc, ul, ur, normal_only=True)
        else:
            u = fld.u[a]
            n = u.shape[a]
            for side in (0, 1):
                sl = face_slice(a, 0 if side == 0 else -1)
                if n >= 2:
                    c0 = u[face_slice(a, 0 if side == 0 else -1)]
                    c1 = u[face_slice(a, 1 if side == 0 else -2)]
                    uf[sl] = 1.5 * c0 - 0.5 * c1
                else:
                    uf[sl] = u[face_slice(a, 0)]
        out.append(uf)
    return out


def divergence_field(fld: FluidField, dt: float, bc: BoundarySpec | None = None) -> np.ndarray:
    """Per-cell ``div(eps u) - (eps - eps_prev)/dt`` from face velocities."""
    h = fld.grid.h
    vol = float(np.prod(h))
    net = np.zeros(fld.block.shape)
    for a, uf in enumerate(face_velocities(fld, bc)):
        net += face_diff(face_eps(fld.eps_pad, a) * (vol / h[a]) * uf, a)
    return net / vol - (fld.eps - fld.eps_prev) / dt


def divergence_residual(fld: FluidField, dt: float, bc: BoundarySpec | None = None) -> float:
    return float(np.max(np.abs(divergence_field(fld, dt, bc))))


def boundary_flux(fld: FluidField) -> float:
    """Net outward volume flux of ``eps u`` through the domain faces owned by this block."""
    h = fld.grid.h
    vol = float(np.prod(h))
    total = 0.0
    for a, uf in enumerate(face_velocities(fld)):
        q = face_eps(fld.eps_pad, a) * (vol / h[a]) * uf
        if fld.block.at_boundary(a, 0):
            total -= float(np.sum(q[face_slice(a, 0)]))
        if fld.block.at_boundary(a, 1):
            total += float(np.sum(q[face_slice(a, -1)]))
    return total
