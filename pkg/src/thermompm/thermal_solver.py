"""Temperature stage: particle/grid transfers, narrow-band advection, a merged
implicit diffusion solve with level-set switched coefficients, and BFS
extrapolation of the air temperature into solid cells.

Temperatures live on the pressure cells (cell centers).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fluid_solver import corners_to_cells, semi_lagrangian
from .grid_core import GridDescriptor, linear_weights
from .linear_solvers import conjugate_gradient

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ThermalParams:
    K_air: float = 0.01
    K_solid: float = 0.1
    cp_air: float = 1.0
    cp_solid: float = 1.0
    rho_air: float = 1.0
    rho_solid: float = 1.0
    T_bar: float = 298.0
    cg_tol: float = 1e-12
    max_iter: int = 5000

    def __post_init__(self):
        for name in ("K_air", "K_solid", "cp_air", "cp_solid", "rho_air", "rho_solid"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class DiffusionInfo:
    iterations: int = 0
    residual: float = 0.0


def heaviside_coefficients(phi, K_air, K_solid, cp_air, cp_solid, rho_air, rho_solid):
    """Per-cell conductivity and volumetric heat capacity; phi = 0 counts as air."""
    solid = np.asarray(phi) < 0
    K = np.where(solid, K_solid, K_air)
    rho_cp = np.where(solid, rho_solid * cp_solid, rho_air * cp_air)
    return K, rho_cp


def temperature_p2g(x, m, T, gradT, cells: GridDescriptor):
    """Linear APIC heat transfer; returns (T grid, mass grid) on the cells.

    Cells without mass read 0.
    """
    x = np.asarray(x, float).reshape(-1, cells.dim)
    mass = np.zeros(cells.dims)
    Tg = np.zeros(cells.dims)
    if x.shape[0] == 0:
        return Tg, mass
    st = linear_weights(x, cells)
    keys = cells.pack(st.indices).reshape(-1)
    offsets = cells.node_position(st.indices) - x[:, None, :]
    wm = st.weights * np.asarray(m, float)[:, None]
    heat = wm * (np.asarray(T, float)[:, None] + np.einsum("nsa,na->ns", offsets, gradT))
    m_flat = np.bincount(keys, weights=wm.reshape(-1), minlength=cells.size)
    h_flat = np.bincount(keys, weights=heat.reshape(-1), minlength=cells.size)
    has = m_flat > 0
    out = np.zeros(cells.size)
    out[has] = h_flat[has] / m_flat[has]
    return out.reshape(cells.dims), m_flat.reshape(cells.dims)


def advect_temperature(T, u_corners, cells: GridDescriptor, dt: float, T_bar: float,
                       band_T=None, band_mass=None):
    """Semi-Lagrangian air temperature, kept from particles where they deposit mass.

    Cell velocities are the corner average; backtraces that leave the grid
    pick up the ambient temperature.
    """
    u_c = corners_to_cells(u_corners)
    adv, left = semi_lagrangian(T, cells, u_c, dt)
    adv[left] = T_bar
    if band_T is not None and band_mass is not None:
        band = band_mass > 0
        adv[band] = band_T[band]
    return adv


def merge_temperatures(T_fluid, T_mpm, solid_mask):
    return np.where(solid_mask, T_mpm, T_fluid)


def _face_pairs(dims):
    """Flat index pairs of face-adjacent cells, one array pair per axis."""
    idx = np.arange(int(np.prod(dims))).reshape(dims)
    for a in range(len(dims)):
        lo = [slice(None)] * len(dims)
        hi = [slice(None)] * len(dims)
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        yield idx[tuple(lo)].reshape(-1), idx[tuple(hi)].reshape(-1)


def diffusion_matrix(K, rho_cp, dx: float, dt: float) -> sp.csr_matrix:
    """Backward-Euler heat operator rho_cp/dt I + L_K with insulated domain walls.

    Face conductivity is the harmonic mean of the two cells.
    """
    dims = K.shape
    n = int(np.prod(dims))
    Kf = K.reshape(-1)
    rows, cols, vals = [], [], []
    diag = rho_cp.reshape(-1) / dt
    diag = diag.astype(float).copy()
    for i, j in _face_pairs(dims):
        kf = 2.0 * Kf[i] * Kf[j] / (Kf[i] + Kf[j]) / dx ** 2
        rows += [i, j]
        cols += [j, i]
        vals += [-kf, -kf]
        np.add.at(diag, i, kf)
        np.add.at(diag, j, kf)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n))


def diffusion_solve(T, K, rho_cp, dx: float, dt: float, fixed_mask=None, fixed_values=None,
                    tol: float = 1e-12, max_iter: int = 5000):
    """One implicit diffusion step; returns (T_new, DiffusionInfo).

    ``fixed_mask`` cells hold ``fixed_values`` as Dirichlet temperatures.
    """
    T = np.asarray(T, float)
    A = diffusion_matrix(np.asarray(K, float), np.asarray(rho_cp, float), dx, dt)
    b = (np.asarray(rho_cp, float) * T / dt).reshape(-1)
    x0 = T.reshape(-1).copy()
    if fixed_mask is not None and np.any(fixed_mask):
        fixed = np.asarray(fixed_mask).reshape(-1)
        vals = np.broadcast_to(np.asarray(fixed_values, float), T.shape).reshape(-1)
        free = np.nonzero(~fixed)[0]
        fx = np.nonzero(fixed)[0]
        Aff = A[free][:, free]
        bf = b[free] - A[free][:, fx] @ vals[fx]
        res = conjugate_gradient(Aff, bf, x0[free], tol, max_iter, Aff.diagonal(), "heat diffusion")
        out = vals.copy()
        out[free] = res.x
    else:
        res = conjugate_gradient(A, b, x0, tol, max_iter, A.diagonal(), "heat diffusion")
        out = res.x
    return out.reshape(T.shape), DiffusionInfo(res.iterations, res.residual)


def extrapolate_fluid_temperature(T, solid_mask):
    """Fill solid cells outward from known air cells, one BFS layer at a time.

    Each newly reached cell takes the mean of its already known face
    neighbors, so the result does not depend on visiting order.
    """
    solid_mask = np.asarray(solid_mask, bool)
    if solid_mask.all():
        raise ValueError("cannot extrapolate air temperature: every cell is solid")
    out = np.asarray(T, float).copy()
    known = ~solid_mask
    d = out.ndim
    while not known.all():
        total = np.zeros_like(out)
        count = np.zeros(out.shape)
        for a in range(d):
            for shift in (1, -1):
                src = [slice(None)] * d
                dst = [slice(None)] * d
                if shift == 1:
                    src[a], dst[a] = slice(0, -1), slice(1, None)
                else:
                    src[a], dst[a] = slice(1, None), slice(0, -1)
                src, dst = tuple(src), tuple(dst)
                total[dst] += np.where(known[src], out[src], 0.0)
                count[dst] += known[src]
        layer = ~known & (count > 0)
        out[layer] = total[layer] / count[layer]
        known = known | layer
    return out


def temperature_g2p(T, cells: GridDescriptor, x):
    """Interpolated temperature and its gradient at particle positions."""
    x = np.asarray(x, float).reshape(-1, cells.dim)
    if x.shape[0] == 0:
        return np.zeros(0), np.zeros((0, cells.dim))
    st = linear_weights(x, cells)
    Ti = np.asarray(T)[tuple(st.indices[..., a] for a in range(cells.dim))]
    Tp = np.sum(st.weights * Ti, axis=1)
    grad = np.einsum("ns,nsa->na", Ti, st.gradients)
    return Tp, grad


@dataclass
class ThermalResult:
    T_fluid: np.ndarray      # air temperature carried to the next step
    T_merged: np.ndarray     # diffused field including solid cells
    solid_mask: np.ndarray
    info: DiffusionInfo


def thermal_step(T_fluid, u_corners, cells: GridDescriptor, mpm, smoke, phi, params: ThermalParams,
                 dt: float, fixed_mask=None, fixed_values=None) -> ThermalResult:
    """Advect, merge, diffuse, extrapolate; particle T and gradT are updated in place."""
    T_s, m_s = temperature_p2g(smoke.x, smoke.m, smoke.T, smoke.gradT, cells)
    T_adv = advect_temperature(T_fluid, u_corners, cells, dt, params.T_bar, T_s, m_s)
    T_m, m_m = temperature_p2g(mpm.x, mpm.m, mpm.T, mpm.gradT, cells)
    solid = m_m > 0
    merged = merge_temperatures(T_adv, T_m, solid)
    K, rho_cp = heaviside_coefficients(phi, params.K_air, params.K_solid, params.cp_air,
                                       params.cp_solid, params.rho_air, params.rho_solid)
    T_new, info = diffusion_solve(merged, K, rho_cp, cells.dx, dt, fixed_mask, fixed_values,
                                  params.cg_tol, params.max_iter)
    if len(mpm):
        mpm.T, mpm.gradT = temperature_g2p(T_new, cells, mpm.x)
    if len(smoke):
        smoke.T, smoke.gradT = temperature_g2p(T_new, cells, smoke.x)
    T_air = extrapolate_fluid_temperature(T_new, solid) if np.any(solid) else T_new
    return ThermalResult(T_air, T_new, solid, info)
