"""Burn-state machine: fuel decay, combustion heating and flame-front spread.

Particles move O -> TB -> B -> D.  A burning particle schedules its closest
unburnt surface neighbor to ignite after ``distance / c_flame`` seconds,
provided that neighbor is already hotter than the ignition threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .grid_core import hash_build
from .particles import BurnState, MpmParticles, SmokeParticles

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IgnitionParams:
    F0: float = 1.0
    F_min: float = 0.3
    gamma: float = 1.0
    beta: float = 1.0e3
    T_ignition: float = 600.0
    T_max: float = 1200.0
    c_flame: float = 0.03

    def __post_init__(self):
        if not self.F0 > self.F_min > 0:
            raise ValueError("need F0 > F_min > 0")
        for name in ("gamma", "beta", "c_flame"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.T_max > self.T_ignition:
            raise ValueError("T_max must exceed T_ignition")


def fuel_level(fuel0, gamma, t_now, burn_start):
    """Closed-form fuel F0 * exp(-gamma * (t - t_start))."""
    return np.asarray(fuel0) * np.exp(-np.asarray(gamma) * (t_now - np.asarray(burn_start)))


def update_fuel(particles: MpmParticles, t_now: float, F_min: float) -> np.ndarray:
    """Refresh the fuel of burning particles; those below F_min become burnt.

    Returns the mask of particles that switched to D.
    """
    burning = particles.state == BurnState.B
    if not np.any(burning):
        return np.zeros(len(particles), dtype=bool)
    particles.fuel[burning] = fuel_level(particles.fuel0[burning], particles.gamma[burning],
                                         t_now, particles.burn_start_time[burning])
    burnt = burning & (particles.fuel < F_min)
    particles.state[burnt] = BurnState.D
    return burnt


def update_smoke_fuel(smoke: SmokeParticles, t_now: float, gamma: float) -> None:
    # smoke always burns, starting at its emission time
    smoke.fuel = fuel_level(smoke.fuel0, gamma, t_now, smoke.birth_time)


def update_burn_temperature(T, fuel, beta: float, dt: float, T_max: float):
    return np.minimum(T + beta * fuel * dt, T_max)


def compute_surface_set(particles: MpmParticles, boundary_ids, dx: float, origin) -> np.ndarray:
    """Sorted ids of the unburnt particles closest to each boundary particle."""
    unburnt = np.nonzero(particles.state == BurnState.O)[0]
    boundary_ids = np.asarray(boundary_ids, dtype=np.int64)
    if unburnt.size == 0 or boundary_ids.size == 0:
        return np.zeros(0, dtype=np.int64)
    h = hash_build(particles.x[unburnt], dx, origin, unburnt)
    ids, _ = h.closest(particles.x[boundary_ids])
    return np.unique(ids[ids >= 0])


def ignite_neighbors(particles: MpmParticles, surface_ids, t_now: float, T_ignition: float,
                     dx: float, origin) -> np.ndarray:
    """Schedule hot surface particles next to burning ones; returns scheduled ids.

    Several burning particles may target the same neighbor; the earliest
    time to burn wins, and an already scheduled particle keeps the earlier
    of its old and new times.
    """
    burning = np.nonzero(particles.state == BurnState.B)[0]
    surface_ids = np.asarray(surface_ids, dtype=np.int64)
    if burning.size == 0 or surface_ids.size == 0:
        return np.zeros(0, dtype=np.int64)
    h = hash_build(particles.x[surface_ids], dx, origin, surface_ids)
    q, dist = h.closest(particles.x[burning])
    ok = q >= 0
    p, q, dist = burning[ok], q[ok], dist[ok]
    hot = particles.T[q] > T_ignition
    p, q, dist = p[hot], q[hot], dist[hot]
    if q.size == 0:
        return q
    when = t_now + dist / particles.c_flame[p]
    order = np.lexsort((when, q))
    q, when = q[order], when[order]
    first = np.ones(q.size, dtype=bool)
    first[1:] = q[1:] != q[:-1]
    q, when = q[first], when[first]
    eligible = (particles.state[q] == BurnState.O) | (particles.state[q] == BurnState.TB)
    q, when = q[eligible], when[eligible]
    prev = particles.time_to_burn[q]
    particles.time_to_burn[q] = np.where(np.isnan(prev), when, np.minimum(prev, when))
    particles.state[q] = BurnState.TB
    return q


def advance_states(particles: MpmParticles, t_now: float) -> np.ndarray:
    """TB particles whose time has come start burning at their scheduled instant."""
    due = (particles.state == BurnState.TB) & (t_now >= particles.time_to_burn)
    particles.state[due] = BurnState.B
    particles.burn_start_time[due] = particles.time_to_burn[due]
    return due


def select_seed_particles(x, ids=None, point=None, radius: float = 0.0) -> np.ndarray:
    """Particles named by an explicit id list or by a ball (radius 0: nearest one)."""
    x = np.asarray(x, float)
    if ids is not None:
        ids = np.unique(np.asarray(ids, dtype=np.int64))
        if ids.size == 0 or ids.min() < 0 or ids.max() >= x.shape[0]:
            raise ValueError(f"ignition seed ids out of range for {x.shape[0]} particles")
        return ids
    if point is None:
        raise ValueError("ignition seed needs ids or a point")
    dist = np.linalg.norm(x - np.asarray(point, float), axis=1)
    if radius > 0:
        sel = np.nonzero(dist <= radius)[0]
    elif x.shape[0]:
        sel = np.array([np.argmin(dist)])
    else:
        sel = np.zeros(0, dtype=np.int64)
    if sel.size == 0:
        raise ValueError(f"ignition seed at {list(point)} with radius {radius} matched no particle")
    return sel


def seed_ignition(particles: MpmParticles, seeds, T_ignition: float) -> None:
    particles.state[seeds] = BurnState.B
    particles.burn_start_time[seeds] = 0.0
    particles.time_to_burn[seeds] = 0.0
    particles.T[seeds] = np.maximum(particles.T[seeds], T_ignition)


def radial_fuel(x, axis_origin, axis_direction, radius: float):
    """Initial fuel growing linearly from 1 on the axis to 2 at ``radius``."""
    a = np.asarray(axis_direction, float)
    a = a / np.linalg.norm(a)
    rel = np.asarray(x, float) - np.asarray(axis_origin, float)
    r = np.linalg.norm(rel - np.outer(rel @ a, a), axis=1)
    return np.clip(1.0 + r / radius, 1.0, 2.0)


@dataclass
class IgnitionReport:
    burnt: int = 0
    scheduled: int = 0
    started: int = 0
    surface: int = 0


def ignition_step(particles: MpmParticles, smoke: SmokeParticles, boundary_ids, t_now: float,
                  dt: float, params: IgnitionParams, dx: float, origin) -> IgnitionReport:
    """Fuel decay, heating, surface extraction, neighbor ignition, state advance."""
    burnt = update_fuel(particles, t_now, params.F_min)
    burning = particles.state == BurnState.B
    particles.T[burning] = update_burn_temperature(particles.T[burning], particles.fuel[burning],
                                                   params.beta, dt, params.T_max)
    np.minimum(particles.T, params.T_max, out=particles.T)
    if len(smoke):
        update_smoke_fuel(smoke, t_now, params.gamma)
        smoke.T = update_burn_temperature(smoke.T, smoke.fuel, params.beta, dt, params.T_max)
    surface = compute_surface_set(particles, boundary_ids, dx, origin)
    scheduled = ignite_neighbors(particles, surface, t_now, params.T_ignition, dx, origin)
    started = advance_states(particles, t_now)
    return IgnitionReport(int(burnt.sum()), int(scheduled.size), int(started.sum()), int(surface.size))
