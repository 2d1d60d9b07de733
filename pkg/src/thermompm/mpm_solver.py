"""Solid mechanics stage: APIC transfers, explicit grid dynamics and the
burn-driven deformation hooks (shrinking, constitutive switch), plus the
particle level set / boundary extraction that feeds smoke sampling.

The MPM grid is node-collocated with the fluid pressure cells and uses
quadratic B-splines.  Grid quantities live in sparse storage keyed by the
nodes the particle stencils touch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .constitutive import (
    ElasticParams,
    PlasticParams,
    drucker_prager_project,
    fixed_corotated_stress,
    stvk_hencky_stress,
)
from .grid_core import (
    GridDescriptor,
    SparseField,
    SpatialHash,
    clamp_positions,
    hash_build,
    quadratic_valid_bounds,
    quadratic_weights,
    scatter_add,
)
from .particles import BurnState, Model, MpmParticles, SmokeParticles

logger = logging.getLogger(__name__)

APIC_QUADRATIC_SCALE = 4.0  # inverse inertia tensor is 4/dx^2 for quadratic splines
AXIS_GUARD = 1e-6           # fraction of dx below which a particle counts as on-axis


@dataclass
class MpmGridState:
    """Active MPM grid nodes and the particle stencils that produced them."""
    descriptor: GridDescriptor
    keys: np.ndarray
    mass: np.ndarray
    momentum: np.ndarray
    velocity: np.ndarray
    force: np.ndarray
    # per-particle stencil cache, shape (N, 3**d, ...)
    slots: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    gradients: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)

    def sparse(self, name: str) -> SparseField:
        return SparseField.from_arrays(self.descriptor, self.keys, getattr(self, name))

    def node_indices(self) -> np.ndarray:
        return self.descriptor.unpack(self.keys)

    def dense(self, name: str) -> np.ndarray:
        return self.sparse(name).to_dense()


@dataclass(frozen=True)
class ShrinkConfig:
    mode: str = "none"  # none | isotropic | anisotropic_cylindrical
    c_shrink: float = 1.0
    c_radial: float = 1.0
    c_longitudinal: float = 1.0
    axis_origin: tuple = (0.0, 0.0, 0.0)
    axis_direction: tuple = (1.0, 0.0, 0.0)
    T_evap: float = 373.0
    T_max: float = 1200.0

    def __post_init__(self):
        if self.mode not in ("none", "isotropic", "anisotropic_cylindrical"):
            raise ValueError(f"unknown shrink mode {self.mode!r}")
        if not self.T_max > self.T_evap:
            raise ValueError("shrink T_max must exceed T_evap")
        for name in ("c_shrink", "c_radial", "c_longitudinal"):
            if not 1.0 <= getattr(self, name) <= 1.1:
                raise ValueError(f"{name} must lie in [1, 1.1]")
        if self.mode == "anisotropic_cylindrical" and not np.linalg.norm(self.axis_direction) > 0:
            raise ValueError("cylinder axis direction must be non-zero")

    def rate(self, T, c_shrink: float):
        """Temperature-dependent shrink coefficient (equals 1 at T_evap)."""
        return (c_shrink - 1.0) / (self.T_max - self.T_evap) * (np.asarray(T) - self.T_evap) + 1.0


def _accumulate(keys, contributions, workers):
    unique, total = scatter_add(keys.reshape(-1), contributions.reshape(keys.size, -1), workers)
    return unique, total


def p2g(particles: MpmParticles, grid: GridDescriptor, workers: int = 1) -> MpmGridState:
    """Quadratic APIC particle-to-grid transfer of mass and momentum."""
    n, d = particles.x.shape
    st = quadratic_weights(particles.x, grid)
    node_keys = grid.pack(st.indices)
    offsets = grid.node_position(st.indices) - particles.x[:, None, :]
    wm = st.weights * particles.m[:, None]
    affine = np.einsum("nij,nsj->nsi", particles.C, offsets)
    mom = wm[..., None] * (particles.v[:, None, :] + affine)
    keys, inverse = np.unique(node_keys.reshape(-1), return_inverse=True)
    inverse = inverse.reshape(n, -1)
    _, total = _accumulate(node_keys, np.concatenate([wm[..., None], mom], axis=-1), workers)
    mass = total[:, 0]
    momentum = total[:, 1:]
    velocity = np.zeros_like(momentum)
    pos = mass > 0
    velocity[pos] = momentum[pos] / mass[pos, None]
    return MpmGridState(grid, keys, mass, momentum, velocity, np.zeros_like(momentum),
                        inverse, st.weights, st.gradients, offsets)


def particle_stress(particles: MpmParticles, fcr: ElasticParams, hencky: ElasticParams) -> np.ndarray:
    """First Piola-Kirchhoff stress of every particle according to its model tag."""
    n, d = particles.x.shape
    P = np.zeros((n, d, d))
    ids = np.arange(n)
    a = particles.model == Model.FIXED_COROTATED
    if np.any(a):
        P[a] = fixed_corotated_stress(particles.F[a], fcr, ids[a])
    b = ~a
    if np.any(b):
        P[b] = stvk_hencky_stress(particles.F[b], hencky, ids[b])
    return P


def apply_plasticity(particles: MpmParticles, hencky: ElasticParams, plastic: PlasticParams) -> None:
    dp = particles.model == Model.STVK_HENCKY_DP
    if np.any(dp):
        particles.F[dp] = drucker_prager_project(particles.F[dp], hencky, plastic, np.nonzero(dp)[0])


def grid_forces(particles: MpmParticles, state: MpmGridState, fcr: ElasticParams,
                hencky: ElasticParams, gravity, workers: int = 1) -> np.ndarray:
    """Nodal force: -sum_p V0 P F^T grad w + m_i g.  Stored on ``state`` too."""
    P = particle_stress(particles, fcr, hencky)
    kirchhoff = particles.V0[:, None, None] * P @ np.swapaxes(particles.F, 1, 2)
    contrib = -np.einsum("nij,nsj->nsi", kirchhoff, state.gradients)
    n, s, d = contrib.shape
    internal = np.zeros((state.keys.size, d))
    for c in range(d):
        internal[:, c] = np.bincount(state.slots.reshape(-1), weights=contrib[..., c].reshape(-1),
                                     minlength=state.keys.size)
    state.force = internal + state.mass[:, None] * np.asarray(gravity, float)[None, :]
    return state.force


def grid_update(state: MpmGridState, dt: float, bc_width: int = 2) -> np.ndarray:
    """Explicit velocity update followed by separating wall conditions.

    Nodes within ``bc_width`` layers of a domain wall lose any velocity
    component pointing into that wall.
    """
    v = np.zeros_like(state.momentum)
    pos = state.mass > 0
    v[pos] = (state.momentum[pos] + dt * state.force[pos]) / state.mass[pos, None]
    idx = state.node_indices()
    dims = np.asarray(state.descriptor.dims)
    for a in range(v.shape[1]):
        low = (idx[:, a] < bc_width) & (v[:, a] < 0)
        high = (idx[:, a] >= dims[a] - bc_width) & (v[:, a] > 0)
        v[low | high, a] = 0.0
    state.velocity = v
    return v


def g2p(state: MpmGridState, particles: MpmParticles, dt: float) -> MpmParticles:
    """APIC grid-to-particle transfer, F update and advection (in place)."""
    vi = state.velocity[state.slots]                       # (N, S, d)
    w = state.weights[..., None]
    particles.v = np.sum(w * vi, axis=1)
    scale = APIC_QUADRATIC_SCALE / state.descriptor.dx ** 2
    particles.C = scale * np.einsum("ns,nsi,nsj->nij", state.weights, vi, state.offsets)
    grad_v = np.einsum("nsi,nsj->nij", vi, state.gradients)
    d = particles.dim
    particles.F = (np.eye(d)[None] + dt * grad_v) @ particles.F
    particles.x = particles.x + dt * particles.v
    lo, hi = quadratic_valid_bounds(state.descriptor)
    clamp_positions(particles.x, lo, hi, "MPM particles")
    return particles


def apply_isotropic_shrinking(particles: MpmParticles, dt: float, cfg: ShrinkConfig) -> np.ndarray:
    """Scale F by (1 + c dt) for particles hotter than T_evap; returns the mask."""
    hot = particles.T > cfg.T_evap
    if cfg.mode != "isotropic" or not np.any(hot):
        return np.zeros(len(particles), dtype=bool)
    c = cfg.rate(particles.T[hot], cfg.c_shrink)
    particles.F[hot] *= (1.0 + c * dt)[:, None, None]
    return hot


def cylinder_basis(y, z, r):
    """(e_x, e_theta, e_r) rows for points at cross-section coordinates (y, z)."""
    y, z, r = np.broadcast_arrays(*(np.asarray(a, float) for a in (y, z, r)))
    zero = np.zeros_like(y)
    one = np.ones_like(y)
    ex = np.stack([one, zero, zero], axis=-1)
    etheta = np.stack([zero, z / r, -y / r], axis=-1)
    er = np.stack([zero, y / r, z / r], axis=-1)
    return ex, etheta, er


def cylindrical_decompose(F, y, z, r):
    """Rows u1, u2, u3 with F = e_x (x) u1 + e_theta (x) u2 + e_r (x) u3.

    Raises ``ValueError`` for on-axis points (r below the guard), which the
    caller treats as "skip this particle".
    """
    F = np.asarray(F, float)
    r = np.asarray(r, float)
    if np.any(r <= 0):
        raise ValueError("on-axis particle: cylindrical frame undefined")
    y = np.asarray(y, float)[..., None]
    z = np.asarray(z, float)[..., None]
    rr = r[..., None]
    u1 = F[..., 0, :]
    u2 = (F[..., 1, :] * z - F[..., 2, :] * y) / rr
    u3 = (F[..., 1, :] * y + F[..., 2, :] * z) / rr
    return u1, u2, u3


def cylindrical_recompose(u1, u2, u3, y, z, r):
    ex, et, er = cylinder_basis(y, z, r)
    return (ex[..., :, None] * u1[..., None, :] + et[..., :, None] * u2[..., None, :]
            + er[..., :, None] * u3[..., None, :])


def _axis_frame(direction) -> np.ndarray:
    """Right-handed rotation whose first row is the unit axis direction."""
    a = np.asarray(direction, float)
    a = a / np.linalg.norm(a)
    helper = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b = np.cross(helper, a)
    b /= np.linalg.norm(b)
    c = np.cross(a, b)
    return np.stack([a, b, c])


def apply_anisotropic_shrinking(particles: MpmParticles, dt: float, cfg: ShrinkConfig,
                                dx: float) -> np.ndarray:
    """Scale the longitudinal (u11) and u22 entries in the cylinder frame.

    Returns the mask of particles that were modified; hot particles within
    the axis guard are skipped.
    """
    n = len(particles)
    hot = particles.T > cfg.T_evap
    if cfg.mode != "anisotropic_cylindrical" or not np.any(hot):
        return np.zeros(n, dtype=bool)
    if particles.dim != 3:
        raise ValueError("cylindrical shrinking needs a 3D scene")
    Q = _axis_frame(cfg.axis_direction)
    local = (particles.x - np.asarray(cfg.axis_origin, float)) @ Q.T
    y, z = local[:, 1], local[:, 2]
    r = np.hypot(y, z)
    act = hot & (r > AXIS_GUARD * dx)
    skipped = int(np.count_nonzero(hot & ~act))
    if skipped:
        logger.debug("skipped %d on-axis particles in cylindrical shrinking", skipped)
    if not np.any(act):
        return act
    F_local = Q @ particles.F[act] @ Q.T
    u1, u2, u3 = cylindrical_decompose(F_local, y[act], z[act], r[act])
    T = particles.T[act]
    s_long = 1.0 + cfg.rate(T, cfg.c_longitudinal) * dt
    s_rad = 1.0 + cfg.rate(T, cfg.c_radial) * dt
    u1 = u1.copy()
    u2 = u2.copy()
    u1[:, 0] *= s_long
    u2[:, 1] *= s_rad
    F_new = cylindrical_recompose(u1, u2, u3, y[act], z[act], r[act])
    particles.F[act] = Q.T @ F_new @ Q
    return act


def update_constitutive_model(particles: MpmParticles) -> int:
    """Switch burnt fixed-corotated particles to Hencky/Drucker-Prager; F is kept."""
    switch = (particles.state == BurnState.D) & (particles.model == Model.FIXED_COROTATED)
    particles.model[switch] = Model.STVK_HENCKY_DP
    return int(np.count_nonzero(switch))


def particle_radius(dim: int, dx: float) -> float:
    return math.sqrt(dim) / 2.0 * dx


def build_particle_level_set(x, grid: GridDescriptor, band: int = 2) -> SparseField:
    """Union-of-spheres signed distance on cell-centered nodes.

    Nodes whose distance value is below ``band * dx`` are stored exactly;
    every other node reads the background ``+band * dx``, so the field is
    the true minimum clamped from above.  Nearest particles come from a
    k-d tree query bounded by the band.
    """
    x = np.asarray(x, float).reshape(-1, grid.dim)
    dx = grid.dx
    cap = band * dx
    phi = SparseField(grid, (), background=cap)
    if x.shape[0] == 0:
        return phi
    r = particle_radius(grid.dim, dx)
    lo = np.floor(grid.grid_coordinates(x.min(axis=0) - cap - r)).astype(np.int64)
    hi = np.ceil(grid.grid_coordinates(x.max(axis=0) + cap + r)).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(grid.dims) - 1)
    if np.any(hi < lo):
        return phi
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, grid.dim)
    pos = grid.node_position(nodes)
    dist, nearest = cKDTree(x).query(pos, distance_upper_bound=cap + r)
    near = np.isfinite(dist)
    # recompute with the same arithmetic as a direct evaluation
    dd = np.linalg.norm(pos[near] - x[nearest[near]], axis=-1) - r
    keep = dd < cap
    keys = grid.pack(nodes[near][keep])
    order = np.argsort(keys)
    phi.keys = keys[order]
    phi.values = dd[keep][order]
    return phi


def combustible_mask(particles: MpmParticles) -> np.ndarray:
    return particles.state != BurnState.D


def find_boundary_particles(x, h: SpatialHash) -> np.ndarray:
    """Boolean mask: a particle is on the boundary when any of its 3**d
    neighboring hash bins (its own included) holds no hashed particle."""
    x = np.asarray(x, float).reshape(-1, h.dim)
    if x.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    bins = h.bins_of(x)
    boundary = np.zeros(x.shape[0], dtype=bool)
    for off in np.ndindex(*([3] * h.dim)):
        boundary |= ~h.occupied(bins + np.asarray(off) - 1)
    return boundary


def _emission_rng(seed: int, step: int, pid: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[int(step), int(pid), 0, 0]))


def sample_smoke(particles: MpmParticles, boundary_ids, n_per: int, dx: float, origin,
                 T_ignition: float, mass: float, fuel0: float, t_now: float,
                 seed: int, step: int) -> SmokeParticles:
    """Emit ``n_per`` smoke particles near the boundary anchor of every burning particle.

    Offsets are uniform in [-0.5, 0.5] dx per axis, drawn from a counter-based
    stream keyed by (seed, step, particle id) so emission does not depend on
    processing order.
    """
    d = particles.dim
    burning = np.nonzero(particles.state == BurnState.B)[0]
    boundary_ids = np.asarray(boundary_ids, dtype=np.int64)
    if burning.size == 0 or n_per <= 0:
        return SmokeParticles.empty(d)
    if boundary_ids.size == 0:
        logger.warning("%d burning particles but no boundary particles; no smoke emitted", burning.size)
        return SmokeParticles.empty(d)
    h = hash_build(particles.x[boundary_ids], dx, origin, boundary_ids)
    anchor, _ = h.closest(particles.x[burning])
    missing = anchor < 0
    if np.any(missing):
        logger.warning("no boundary particle within one cell of %d burning particles", int(missing.sum()))
    pos = []
    for pid, b in zip(burning[~missing], anchor[~missing]):
        c = _emission_rng(seed, step, pid).uniform(-0.5, 0.5, size=(n_per, d))
        pos.append(particles.x[b] + c * dx)
    x = np.concatenate(pos) if pos else np.zeros((0, d))
    k = x.shape[0]
    return SmokeParticles(
        x=x, v=np.zeros((k, d)), m=np.full(k, float(mass)), T=np.full(k, float(T_ignition)),
        gradT=np.zeros((k, d)), fuel=np.full(k, float(fuel0)), fuel0=np.full(k, float(fuel0)),
        birth_time=np.full(k, float(t_now)),
    )
