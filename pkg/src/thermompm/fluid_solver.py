"""Incompressible air: solid boundary conditions, narrow-band FLIP /
semi-Lagrangian advection, buoyancy, pressure projection and smoke transport.

Velocities live on cell corners, pressure on cell centers.  Over the whole
domain both are dense arrays; air fills every cell that is not solid, so a
sparse layout would buy nothing here.

The divergence of a cell averages the corner velocities onto its faces:

    div_c = sum_k sum_a (2 k_a - 1) / (2**(d-1) dx) * u_a[c + k],   k in {0,1}^d

and the corner pressure gradient is its negative transpose, which keeps the
projection matrix symmetric positive semi-definite.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import map_coordinates
from scipy.sparse.csgraph import connected_components

from .grid_core import GridDescriptor, linear_valid_bounds, linear_weights
from .linear_solvers import conjugate_gradient
from .particles import SmokeParticles

logger = logging.getLogger(__name__)

FLUID, SOLID, DIRICHLET, NEUMANN = 0, 1, 2, 3
DENSE_POCKET_LIMIT = 4096  # enclosed regions up to this size use a dense least-squares solve


class CompatibilityError(RuntimeError):
    """Enclosed air region whose boundary fluxes do not balance."""


@dataclass
class FluidParams:
    alpha: float = 0.0            # buoyancy coefficient
    alpha_flip: float = 0.99
    rho: float = 1.0
    up_axis: int = 1
    cg_tol: float = 1e-6
    max_iter: int = 2000
    position_update: str = "verbatim"  # verbatim: x += dt v^n ; blended: x += dt v^{n+1}
    pocket_policy: str = "error"       # error | project
    solid_min_mass: float = 0.0        # MPM cell mass above which a cell is solid

    def __post_init__(self):
        if not 0.0 <= self.alpha_flip <= 1.0:
            raise ValueError("alpha_flip must lie in [0, 1]")
        if self.rho <= 0:
            raise ValueError("fluid density must be positive")
        if self.position_update not in ("verbatim", "blended"):
            raise ValueError("position_update must be 'verbatim' or 'blended'")
        if self.pocket_policy not in ("error", "project"):
            raise ValueError("pocket_policy must be 'error' or 'project'")
        if self.solid_min_mass < 0:
            raise ValueError("solid_min_mass must be non-negative")


@dataclass
class FluidState:
    cells: GridDescriptor
    corners: GridDescriptor
    u: np.ndarray                  # (*corner_dims, d)
    p: np.ndarray                  # (*cell_dims)
    labels: np.ndarray = field(default=None)

    @classmethod
    def at_rest(cls, origin, dx: float, cells) -> "FluidState":
        c = GridDescriptor.for_cells(origin, dx, cells)
        k = GridDescriptor.for_corners(origin, dx, cells)
        return cls(c, k, np.zeros((*k.dims, c.dim)), np.zeros(c.dims),
                   np.full(c.dims, FLUID, dtype=np.int8))


@dataclass
class ProjectionInfo:
    iterations: int = 0
    residual: float = 0.0
    fluid_cells: int = 0
    pockets: int = 0
    unbalanced: np.ndarray | None = None   # cell mask of pockets whose flux could not balance
    input_speed: float = 0.0               # max |u| entering the solve, after fixed corners


def _corner_offsets(d):
    return list(itertools.product((0, 1), repeat=d))


def _window(k, n):
    return tuple(slice(kk, kk + nn) for kk, nn in zip(k, n))


def default_domain_bcs(cells: GridDescriptor, up_axis: int = 1) -> np.ndarray:
    """Open (p = 0) walls everywhere except a closed, no-slip floor."""
    labels = np.full(cells.dims, FLUID, dtype=np.int8)
    for a in range(cells.dim):
        lo = [slice(None)] * cells.dim
        hi = [slice(None)] * cells.dim
        lo[a] = 0
        hi[a] = -1
        labels[tuple(lo)] = DIRICHLET
        labels[tuple(hi)] = DIRICHLET
    floor = [slice(None)] * cells.dim
    floor[up_axis] = 0
    labels[tuple(floor)] = NEUMANN
    return labels


def mark_solid_cells(labels: np.ndarray, mpm_state, min_mass: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Label cells carrying MPM mass above ``min_mass`` as solid; returns
    (labels, cell velocity).

    The MPM grid shares the pressure cells, so node keys index cells
    directly.  Cell velocity is the transferred momentum over mass.
    """
    labels = labels.copy()
    d = labels.ndim
    vel = np.zeros((*labels.shape, d))
    if mpm_state is None or mpm_state.keys.size == 0:
        return labels, vel
    has = mpm_state.mass > min_mass
    keys = mpm_state.keys[has]
    flat = labels.reshape(-1)
    flat[keys] = SOLID
    vflat = vel.reshape(-1, d)
    vflat[keys] = mpm_state.momentum[has] / mpm_state.mass[has, None]
    return labels, vel


def constrained_corners(labels: np.ndarray, cell_velocity: np.ndarray):
    """Corners touching a solid or closed-wall cell and their prescribed velocity.

    A corner shared by several constrained cells takes the mean of their
    velocities.
    """
    d = labels.ndim
    n = labels.shape
    cons = np.pad((labels == SOLID) | (labels == NEUMANN), 1).astype(float)
    vel = np.pad(cell_velocity * cons[(slice(1, -1),) * d][..., None], [(1, 1)] * d + [(0, 0)])
    nc = tuple(m + 1 for m in n)
    count = np.zeros(nc)
    total = np.zeros((*nc, d))
    for k in _corner_offsets(d):
        w = _window(k, nc)
        count += cons[w]
        total += vel[w]
    fixed = count > 0
    out = np.zeros_like(total)
    out[fixed] = total[fixed] / count[fixed][:, None]
    return fixed, out


def divergence(u: np.ndarray, dx: float) -> np.ndarray:
    d = u.shape[-1]
    n = tuple(m - 1 for m in u.shape[:-1])
    out = np.zeros(n)
    scale = 1.0 / (2 ** (d - 1) * dx)
    for k in _corner_offsets(d):
        w = _window(k, n)
        for a in range(d):
            out += (2 * k[a] - 1) * scale * u[w + (a,)]
    return out


def divergence_transpose(p: np.ndarray, dx: float) -> np.ndarray:
    """D^T p on corners (minus the discrete pressure gradient)."""
    d = p.ndim
    nc = tuple(m + 1 for m in p.shape)
    out = np.zeros((*nc, d))
    scale = 1.0 / (2 ** (d - 1) * dx)
    for k in _corner_offsets(d):
        w = _window(k, p.shape)
        for a in range(d):
            out[w + (a,)] += (2 * k[a] - 1) * scale * p
    return out


def divergence_matrix(cell_dims, dx: float) -> sp.csr_matrix:
    """Sparse D mapping flattened corner velocities (node-major, component-minor) to cells."""
    d = len(cell_dims)
    nc = tuple(m + 1 for m in cell_dims)
    cells = np.stack(np.meshgrid(*[np.arange(m) for m in cell_dims], indexing="ij"), -1).reshape(-1, d)
    row_id = np.arange(cells.shape[0])
    rows, cols, vals = [], [], []
    scale = 1.0 / (2 ** (d - 1) * dx)
    for k in _corner_offsets(d):
        node = np.ravel_multi_index(tuple((cells + np.asarray(k)).T), nc)
        for a in range(d):
            rows.append(row_id)
            cols.append(node * d + a)
            vals.append(np.full(row_id.size, (2 * k[a] - 1) * scale))
    n_rows = int(np.prod(cell_dims))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n_rows, int(np.prod(nc)) * d))


def _null_projected_solve(A, b):
    """Min-norm least-squares solve of a small singular block."""
    dense = A.toarray()
    x, *_ = np.linalg.lstsq(dense, b, rcond=1e-12)
    return x, b - dense @ x


def pressure_solve(u_star, labels, fixed, fixed_velocity, rho: float, dx: float, dt: float,
                   tol: float = 1e-6, max_iter: int = 2000, pocket_policy: str = "error"):
    """Project ``u_star`` to be discretely divergence-free on fluid cells.

    Fixed corners take their prescribed velocity, pressure is zero on open
    cells, and the remaining corners are corrected by ``dt/rho D^T p``.
    Returns ``(p, u_new, ProjectionInfo)``.
    """
    d = u_star.shape[-1]
    u = u_star.copy()
    u[fixed] = fixed_velocity[fixed]
    p = np.zeros(labels.shape)
    fluid = np.nonzero(labels.reshape(-1) == FLUID)[0]
    info = ProjectionInfo(fluid_cells=int(fluid.size), input_speed=float(np.abs(u).max(initial=0.0)))
    if fluid.size == 0:
        return p, u, info
    free_cols = np.nonzero(np.repeat(~fixed.reshape(-1), d))[0]
    D = divergence_matrix(labels.shape, dx)
    Df = D[fluid][:, free_cols]
    A = (Df @ Df.T).tocsr()
    b = -(rho / dt) * divergence(u, dx).reshape(-1)[fluid]

    # regions with no free corner shared with an open cell have no pressure datum
    dirichlet = np.nonzero(labels.reshape(-1) == DIRICHLET)[0]
    anchored = np.zeros(fluid.size, dtype=bool)
    if dirichlet.size:
        link = Df @ D[dirichlet][:, free_cols].T
        anchored = np.asarray(abs(link).sum(axis=1)).ravel() > 0
    ncomp, comp = connected_components(A, directed=False)
    comp_anchored = np.zeros(ncomp, dtype=bool)
    np.logical_or.at(comp_anchored, comp, anchored)
    pocket_cells = ~comp_anchored[comp]
    x = np.zeros(fluid.size)
    if np.any(pocket_cells):
        info.pockets = int(np.count_nonzero(~comp_anchored))
        for c in np.nonzero(~comp_anchored)[0]:
            idx = np.nonzero(comp == c)[0]
            Ab, bb = A[idx][:, idx], b[idx]
            if idx.size <= DENSE_POCKET_LIMIT:
                xb, resid = _null_projected_solve(Ab, bb)
            else:
                bb = bb - bb.mean()
                xb = conjugate_gradient(Ab, bb, tol=tol, max_iter=max_iter,
                                        diag=Ab.diagonal(), what="pressure pocket").x
                xb -= xb.mean()
                resid = b[idx] - Ab @ xb
            scale = max(np.abs(b).max(), 1e-300)
            worst = np.abs(resid).max()
            if worst > 1e3 * tol * scale:
                msg = (f"enclosed air region of {idx.size} cells has unbalanced boundary flux "
                       f"(incompatible residual {worst:.3e})")
                if pocket_policy == "error":
                    raise CompatibilityError(msg)
                logger.debug("%s; projected out", msg)
            if worst > tol * scale:
                # left with divergence above the solve tolerance; report the cells
                if info.unbalanced is None:
                    info.unbalanced = np.zeros(labels.shape, dtype=bool)
                info.unbalanced.reshape(-1)[fluid[idx]] = True
            x[idx] = xb
    free = ~pocket_cells
    if np.any(free):
        idx = np.nonzero(free)[0]
        Ab = A[idx][:, idx] if not np.all(free) else A
        res = conjugate_gradient(Ab, b[idx], tol=tol, max_iter=max_iter,
                                 diag=Ab.diagonal(), what="pressure projection")
        x[idx] = res.x
        info.iterations, info.residual = res.iterations, res.residual
    p.reshape(-1)[fluid] = x
    corr = divergence_transpose(p, dx)
    corr[fixed] = 0.0
    u_new = u + (dt / rho) * corr
    extrapolate_open_boundary(u_new, labels, fixed)
    return p, u_new, info


def extrapolate_open_boundary(u: np.ndarray, labels: np.ndarray, fixed: np.ndarray) -> None:
    """Copy the inward neighbor's velocity onto free corners of the domain faces.

    These corners border only open wall cells, so the projection never
    touches them; a zero-gradient copy lets flow leave the domain.
    """
    d = labels.ndim
    for a in range(d):
        for outer, inner in ((0, 1), (-1, -2)):
            o = [slice(None)] * d
            i = [slice(None)] * d
            o[a], i[a] = outer, inner
            o, i = tuple(o), tuple(i)
            free = ~fixed[o]
            u[o][free] = u[i][free]


def cells_to_corners(values: np.ndarray) -> np.ndarray:
    """Average cell values onto corners, extending the edge cells outward."""
    d = values.ndim
    padded = np.pad(values, 1, mode="edge")
    nc = tuple(m + 1 for m in values.shape)
    out = np.zeros(nc)
    for k in _corner_offsets(d):
        out += padded[_window(k, nc)]
    return out / 2 ** d


def corners_to_cells(u: np.ndarray) -> np.ndarray:
    d = u.shape[-1]
    n = tuple(m - 1 for m in u.shape[:-1])
    out = np.zeros((*n, d))
    for k in _corner_offsets(d):
        out += u[_window(k, n)]
    return out / 2 ** d


def interpolate_linear(values: np.ndarray, g: GridDescriptor, x) -> np.ndarray:
    """Multilinear interpolation with positions clamped into the node box.

    ``values`` has the grid shape, optionally followed by one component axis.
    """
    x = np.atleast_2d(np.asarray(x, float))
    s = np.clip(g.grid_coordinates(x), 0, np.asarray(g.dims) - 1).T
    if values.ndim == g.dim:
        return map_coordinates(values, s, order=1, mode="nearest")
    return np.stack([map_coordinates(values[..., c], s, order=1, mode="nearest")
                     for c in range(values.shape[-1])], axis=-1)


def backtrace_rk3(x, velocity: np.ndarray, g: GridDescriptor, dt: float) -> np.ndarray:
    """Ralston third-order backward trace through a gridded velocity field."""
    x = np.atleast_2d(np.asarray(x, float))
    k1 = interpolate_linear(velocity, g, x)
    k2 = interpolate_linear(velocity, g, x - 0.5 * dt * k1)
    k3 = interpolate_linear(velocity, g, x - 0.75 * dt * k2)
    return x - dt * (2.0 * k1 + 3.0 * k2 + 4.0 * k3) / 9.0


def _monotone_hermite(f0, f1, f2, f3, t, lo_edge, hi_edge):
    delta = f2 - f1
    d1 = np.where(lo_edge, delta, 0.5 * (f2 - f0))
    d2 = np.where(hi_edge, delta, 0.5 * (f3 - f1))
    flat = delta == 0
    d1 = np.where(flat | (np.sign(d1) != np.sign(delta)), 0.0, d1)
    d2 = np.where(flat | (np.sign(d2) != np.sign(delta)), 0.0, d2)
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(flat, 0.0, d1 / delta)
        b = np.where(flat, 0.0, d2 / delta)
    mag = a * a + b * b
    shrink = np.where(mag > 9.0, 3.0 / np.sqrt(np.where(mag > 9.0, mag, 1.0)), 1.0)
    d1 = d1 * shrink
    d2 = d2 * shrink
    return f1 + t * (d1 + t * ((3.0 * delta - 2.0 * d1 - d2) + t * (d1 + d2 - 2.0 * delta)))


def interpolate_monotonic_cubic(values: np.ndarray, g: GridDescriptor, x) -> np.ndarray:
    """Tensor-product monotone cubic interpolation.

    Slopes are central differences zeroed on sign disagreement and limited
    in magnitude, so each 1D pass stays between the two bracketing samples.
    Along an axis where the 4-point stencil would leave the grid the pass
    is linear.
    """
    x = np.atleast_2d(np.asarray(x, float))
    d = g.dim
    dims = np.asarray(g.dims)
    s = np.clip(g.grid_coordinates(x), 0, dims - 1)
    k = np.clip(np.floor(s).astype(np.int64), 0, np.maximum(dims - 2, 0))
    t = s - k
    lo_edge = k - 1 < 0
    hi_edge = k + 2 > dims - 1
    offs = np.array(list(itertools.product((-1, 0, 1, 2), repeat=d)))
    idx = np.clip(k[:, None, :] + offs[None], 0, dims - 1)
    block = values[tuple(idx[..., a] for a in range(d))]
    extra = values.shape[d:]
    block = block.reshape(x.shape[0], *([4] * d), *extra)
    for a in range(d):
        shape = (x.shape[0],) + (1,) * (block.ndim - 2)
        block = _monotone_hermite(block[:, 0], block[:, 1], block[:, 2], block[:, 3],
                                  t[:, a].reshape(shape), lo_edge[:, a].reshape(shape),
                                  hi_edge[:, a].reshape(shape))
    return block


def semi_lagrangian(values: np.ndarray, g: GridDescriptor, velocity: np.ndarray, dt: float):
    """Advect node values through ``velocity`` (same grid); returns (advected, left_grid)."""
    nodes = g.all_node_positions().reshape(-1, g.dim)
    up = backtrace_rk3(nodes, velocity, g, dt)
    lo = g.node_position(np.zeros(g.dim, dtype=np.int64))
    hi = g.node_position(np.asarray(g.dims) - 1)
    left = np.any((up < lo) | (up > hi), axis=-1)
    out = interpolate_monotonic_cubic(values, g, up)
    return out.reshape(values.shape), left.reshape(g.dims)


def flip_p2g(smoke: SmokeParticles, corners: GridDescriptor):
    """Mass-weighted linear transfer of smoke momentum; returns (u_flip, mass)."""
    d = corners.dim
    mass = np.zeros(corners.dims)
    u = np.zeros((*corners.dims, d))
    if len(smoke) == 0:
        return u, mass
    st = linear_weights(smoke.x, corners)
    keys = corners.pack(st.indices).reshape(-1)
    wm = (st.weights * smoke.m[:, None]).reshape(-1)
    size = corners.size
    m = np.bincount(keys, weights=wm, minlength=size)
    mom = np.stack([np.bincount(keys, weights=wm * np.repeat(smoke.v[:, a], st.weights.shape[1]),
                                minlength=size) for a in range(d)], axis=-1)
    has = m > 0
    vel = np.zeros_like(mom)
    vel[has] = mom[has] / m[has, None]
    return vel.reshape(*corners.dims, d), m.reshape(corners.dims)


def _boundary_nodes(dims) -> np.ndarray:
    mask = np.zeros(dims, dtype=bool)
    for a in range(len(dims)):
        lo = [slice(None)] * len(dims)
        lo[a] = 0
        hi = [slice(None)] * len(dims)
        hi[a] = -1
        mask[tuple(lo)] = True
        mask[tuple(hi)] = True
    return mask


def advect_velocity(u: np.ndarray, corners: GridDescriptor, dt: float,
                    u_flip=None, flip_mass=None) -> np.ndarray:
    """Narrow-band advection: FLIP values where smoke mass sits, semi-Lagrangian elsewhere.

    Domain-boundary corners and corners whose backtrace leaves the grid keep
    their current velocity.
    """
    adv, left = semi_lagrangian(u, corners, u, dt)
    keep = left | _boundary_nodes(corners.dims)
    adv[keep] = u[keep]
    if u_flip is not None and flip_mass is not None:
        band = flip_mass > 0
        adv[band] = u_flip[band]
    return adv


def apply_buoyancy(u: np.ndarray, T_cells: np.ndarray, alpha: float, T_bar: float, dt: float,
                   up_axis: int = 1) -> np.ndarray:
    out = u.copy()
    if alpha != 0.0:
        out[..., up_axis] += dt * alpha * (cells_to_corners(T_cells) - T_bar)
    return out


def smoke_bounds(cells: GridDescriptor):
    """Region where cell-centered linear stencils (used for heat transfer) are valid."""
    return linear_valid_bounds(cells)


def advect_smoke_particles(smoke: SmokeParticles, u_old, u_new, corners: GridDescriptor,
                           cells: GridDescriptor, alpha_flip: float, dt: float,
                           position_update: str = "verbatim") -> SmokeParticles:
    """PIC/FLIP blend of smoke velocities, position update, and domain-exit deletion."""
    if len(smoke) == 0:
        return smoke
    v_pic = interpolate_linear(u_new, corners, smoke.x)
    v_flip = smoke.v + interpolate_linear(u_new - u_old, corners, smoke.x)
    v_new = (1.0 - alpha_flip) * v_pic + alpha_flip * v_flip
    step_v = smoke.v if position_update == "verbatim" else v_new
    out = smoke.copy()
    out.x = smoke.x + dt * step_v
    out.v = v_new
    lo, hi = smoke_bounds(cells)
    inside = np.all((out.x >= lo) & (out.x <= hi), axis=1)
    return out.subset(inside) if not np.all(inside) else out


def fluid_step(state: FluidState, smoke: SmokeParticles, mpm_state, T_cells: np.ndarray,
               T_bar: float, params: FluidParams, dt: float, base_labels=None):
    """One incompressible step; returns (new state, advected smoke, ProjectionInfo)."""
    if base_labels is None:
        base_labels = default_domain_bcs(state.cells, params.up_axis)
    labels, cell_vel = mark_solid_cells(base_labels, mpm_state, params.solid_min_mass)
    fixed, fixed_vel = constrained_corners(labels, cell_vel)
    u_flip, m_flip = flip_p2g(smoke, state.corners)
    u_adv = advect_velocity(state.u, state.corners, dt, u_flip, m_flip)
    u_star = apply_buoyancy(u_adv, T_cells, params.alpha, T_bar, dt, params.up_axis)
    p, u_new, info = pressure_solve(u_star, labels, fixed, fixed_vel, params.rho, state.cells.dx, dt,
                                    params.cg_tol, params.max_iter, params.pocket_policy)
    smoke = advect_smoke_particles(smoke, state.u, u_new, state.corners, state.cells,
                                   params.alpha_flip, dt, params.position_update)
    new = FluidState(state.cells, state.corners, u_new, p, labels)
    return new, smoke, info
