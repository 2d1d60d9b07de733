"""Hyperelastic energies, first Piola-Kirchhoff stresses and plastic projection.

Every function accepts a single d x d deformation gradient or a stack of
shape (N, d, d) and returns matching leading dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEGENERATE_TOL = 1e-8


class DegenerateElementError(ValueError):
    """Deformation gradient too close to (or past) inversion."""

    def __init__(self, message: str, particles=None):
        self.particles = None if particles is None else np.asarray(particles).tolist()
        if self.particles:
            message = f"{message} (particles {self.particles[:10]})"
        super().__init__(message)


@dataclass(frozen=True)
class ElasticParams:
    mu: float
    lam: float

    def __post_init__(self):
        if self.mu < 0 or self.lam < 0:
            raise ValueError("Lame coefficients must be non-negative")

    @classmethod
    def from_young(cls, E: float, nu: float) -> "ElasticParams":
        if E <= 0 or not 0 <= nu < 0.5:
            raise ValueError(f"need E > 0 and 0 <= nu < 0.5, got E={E}, nu={nu}")
        return cls(E / (2 * (1 + nu)), E * nu / ((1 + nu) * (1 - 2 * nu)))


@dataclass(frozen=True)
class PlasticParams:
    friction_angle: float  # degrees

    def __post_init__(self):
        if not 0 < self.friction_angle < 90:
            raise ValueError("friction angle must lie in (0, 90) degrees")

    @property
    def alpha_dp(self) -> float:
        s = math.sin(math.radians(self.friction_angle))
        return math.sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s)


def _batched(F):
    F = np.asarray(F, dtype=float)
    single = F.ndim == 2
    return (F[None] if single else F), single


def _unbatch(x, single):
    return x[0] if single else x


def svd_polar(F):
    """SVD with proper rotations: ``F = U @ diag(sigma) @ V.T``, det U = det V = 1.

    Singular values are sorted descending; a reflection shows up as a
    negative last singular value.
    """
    Fb, single = _batched(F)
    if not np.all(np.isfinite(Fb)):
        raise ValueError("deformation gradient has non-finite entries")
    U, s, Vt = np.linalg.svd(Fb)
    V = np.swapaxes(Vt, -1, -2).copy()
    U = U.copy()
    s = s.copy()
    flip_u = np.linalg.det(U) < 0
    U[flip_u, :, -1] *= -1
    s[flip_u, -1] *= -1
    flip_v = np.linalg.det(V) < 0
    V[flip_v, :, -1] *= -1
    s[flip_v, -1] *= -1
    return _unbatch(U, single), _unbatch(s, single), _unbatch(V, single)


def _compose(U, diag, V):
    return np.einsum("nij,nj,nkj->nik", U, diag, V)


def fixed_corotated_energy(F, p: ElasticParams):
    Fb, single = _batched(F)
    _, s, _ = svd_polar(Fb)
    J = np.linalg.det(Fb)
    psi = p.mu * np.sum((s - 1.0) ** 2, axis=-1) + 0.5 * p.lam * (J - 1.0) ** 2
    return _unbatch(psi, single)


def fixed_corotated_stress(F, p: ElasticParams, ids=None):
    """P = 2 mu (F - R) + lam (J - 1) J F^-T with R the polar rotation."""
    Fb, single = _batched(F)
    J = np.linalg.det(Fb)
    bad = J <= DEGENERATE_TOL
    if np.any(bad):
        which = np.nonzero(bad)[0] if ids is None else np.asarray(ids)[bad]
        raise DegenerateElementError("fixed-corotated stress needs J > 1e-8", which)
    U, _, V = svd_polar(Fb)
    R = U @ np.swapaxes(V, -1, -2)
    FinvT = np.swapaxes(np.linalg.inv(Fb), -1, -2)
    P = 2.0 * p.mu * (Fb - R) + (p.lam * (J - 1.0) * J)[:, None, None] * FinvT
    return _unbatch(P, single)


def _log_singular(s, what, ids=None, tol=0.0):
    bad = np.any(s <= tol, axis=-1)
    if np.any(bad):
        which = np.nonzero(bad)[0] if ids is None else np.asarray(ids)[bad]
        raise DegenerateElementError(f"{what} needs positive singular values", which)
    return np.log(s)


def stvk_hencky_energy(F, p: ElasticParams):
    """mu tr(eta^2) + lam/2 tr(eta)^2 with eta the Hencky (log) strain."""
    Fb, single = _batched(F)
    _, s, _ = svd_polar(Fb)
    eps = _log_singular(s, "Hencky energy")
    tr = eps.sum(axis=-1)
    return _unbatch(p.mu * np.sum(eps ** 2, axis=-1) + 0.5 * p.lam * tr ** 2, single)


def stvk_hencky_stress(F, p: ElasticParams, ids=None):
    Fb, single = _batched(F)
    U, s, V = svd_polar(Fb)
    eps = _log_singular(s, "Hencky stress", ids, DEGENERATE_TOL)
    tr = eps.sum(axis=-1, keepdims=True)
    diag = (2.0 * p.mu * eps + p.lam * tr) / s
    return _unbatch(_compose(U, diag, V), single)


def drucker_prager_project(F_trial, e: ElasticParams, pl: PlasticParams, ids=None):
    """Return-map a trial deformation gradient onto the Drucker-Prager cone.

    Works in Hencky strain.  Expansive states (positive volumetric strain)
    go to the cone tip, states inside the cone are returned unchanged, and
    everything else loses the deviatoric excess along the deviatoric
    direction.  Cohesion is zero.
    """
    Fb, single = _batched(F_trial)
    d = Fb.shape[-1]
    U, s, V = svd_polar(Fb)
    eps = _log_singular(s, "Drucker-Prager projection", ids, DEGENERATE_TOL)
    tr = eps.sum(axis=-1)
    dev = eps - tr[:, None] / d
    dev_norm = np.linalg.norm(dev, axis=-1)
    out = Fb.copy()

    tip = tr > 0
    if e.mu == 0:
        # no shear stiffness: every state sits on the cone tip or inside
        shear_ratio = np.inf
    else:
        shear_ratio = (d * e.lam + 2.0 * e.mu) / (2.0 * e.mu)
    with np.errstate(invalid="ignore"):
        dgamma = dev_norm + pl.alpha_dp * shear_ratio * tr
    project = (~tip) & (dgamma > 0) & (dev_norm > 0)

    if np.any(tip):
        out[tip] = U[tip] @ np.swapaxes(V[tip], -1, -2)
    if np.any(project):
        scale = (dgamma[project] / dev_norm[project])[:, None]
        new_eps = eps[project] - scale * dev[project]
        out[project] = _compose(U[project], np.exp(new_eps), V[project])
    return _unbatch(out, single)


def yield_function(F, e: ElasticParams, pl: PlasticParams):
    """Drucker-Prager yield value of ``F``; <= 0 means admissible."""
    Fb, single = _batched(F)
    d = Fb.shape[-1]
    _, s, _ = svd_polar(Fb)
    eps = _log_singular(s, "yield function")
    tr = eps.sum(axis=-1)
    dev = eps - tr[:, None] / d
    val = np.linalg.norm(dev, axis=-1) + pl.alpha_dp * (d * e.lam + 2 * e.mu) / (2 * e.mu) * tr
    return _unbatch(val, single)
