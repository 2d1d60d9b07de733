"""Structure-of-arrays particle containers shared by the solver stages."""

from __future__ import annotations

from dataclasses import dataclass, fields
from enum import IntEnum

import numpy as np


class BurnState(IntEnum):
    O = 0   # original
    TB = 1  # about to burn
    B = 2   # burning
    D = 3   # burnt


class Model(IntEnum):
    FIXED_COROTATED = 0
    STVK_HENCKY_DP = 1


class _Arrays:
    """Row-wise helpers for dataclasses whose fields are all per-particle arrays."""

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])

    def copy(self):
        return type(self)(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def subset(self, mask):
        return type(self)(**{f.name: getattr(self, f.name)[mask] for f in fields(self)})

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def equal(self, other) -> bool:
        """Bitwise equality of every array (NaN == NaN)."""
        return all(
            a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in ((getattr(self, f.name), getattr(other, f.name)) for f in fields(self))
        )


@dataclass
class MpmParticles(_Arrays):
    x: np.ndarray
    v: np.ndarray
    m: np.ndarray
    V0: np.ndarray
    F: np.ndarray
    C: np.ndarray
    T: np.ndarray
    gradT: np.ndarray
    state: np.ndarray
    fuel: np.ndarray
    burn_start_time: np.ndarray  # NaN while unset
    time_to_burn: np.ndarray     # NaN while unset
    model: np.ndarray
    fuel0: np.ndarray
    gamma: np.ndarray
    c_flame: np.ndarray

    @classmethod
    def create(cls, x, m, V0, T, fuel0, gamma, c_flame, v=None) -> "MpmParticles":
        x = np.asarray(x, dtype=float)
        n, d = x.shape

        def col(val):
            return np.broadcast_to(np.asarray(val, dtype=float), (n,)).copy()

        return cls(
            x=x.copy(),
            v=np.zeros((n, d)) if v is None else np.broadcast_to(np.asarray(v, float), (n, d)).copy(),
            m=col(m), V0=col(V0),
            F=np.tile(np.eye(d), (n, 1, 1)),
            C=np.zeros((n, d, d)),
            T=col(T), gradT=np.zeros((n, d)),
            state=np.full(n, BurnState.O, dtype=np.uint8),
            fuel=col(fuel0),
            burn_start_time=np.full(n, np.nan),
            time_to_burn=np.full(n, np.nan),
            model=np.full(n, Model.FIXED_COROTATED, dtype=np.uint8),
            fuel0=col(fuel0), gamma=col(gamma), c_flame=col(c_flame),
        )

    def check(self) -> None:
        if np.any(self.m <= 0) or np.any(self.V0 <= 0):
            raise ValueError("particle mass and volume must be positive")
        if np.any(self.T < 0) or np.any(self.fuel < 0):
            raise ValueError("temperature and fuel must be non-negative")
        dp = self.model == Model.STVK_HENCKY_DP
        if np.any(dp & (self.state != BurnState.D)):
            raise ValueError("only burnt particles may use the Hencky/Drucker-Prager model")


@dataclass
class SmokeParticles(_Arrays):
    x: np.ndarray
    v: np.ndarray
    m: np.ndarray
    T: np.ndarray
    gradT: np.ndarray
    fuel: np.ndarray
    fuel0: np.ndarray
    birth_time: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> "SmokeParticles":
        return cls(
            x=np.zeros((0, dim)), v=np.zeros((0, dim)), m=np.zeros(0), T=np.zeros(0),
            gradT=np.zeros((0, dim)), fuel=np.zeros(0), fuel0=np.zeros(0), birth_time=np.zeros(0),
        )

    def extend(self, other: "SmokeParticles") -> "SmokeParticles":
        return type(self)(**{
            f.name: np.concatenate([getattr(self, f.name), getattr(other, f.name)])
            for f in fields(self)
        })
