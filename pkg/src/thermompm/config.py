"""Scene configuration: a strict JSON schema mapped onto dataclasses, and
particle sampling of the initial geometry.

Unknown keys, wrong types and violated invariants raise ``ConfigError``
naming the offending field path (for example ``ignition.seeds[0].radius``).
"""

from __future__ import annotations

import json
import math
import types
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union, get_args, get_origin, get_type_hints

import numpy as np

from .constitutive import ElasticParams, PlasticParams
from .fluid_solver import FluidParams
from .grid_core import GridDescriptor, quadratic_valid_bounds
from .ignition import IgnitionParams, radial_fuel, seed_ignition, select_seed_particles
from .mpm_solver import ShrinkConfig
from .particles import MpmParticles
from .thermal_solver import ThermalParams


class ConfigError(ValueError):
    pass


@dataclass
class DomainConfig:
    origin: list[float]
    extent: list[float]


@dataclass
class MaterialConfig:
    youngs_modulus: float = 1.0e3
    poisson_ratio: float = 0.3
    burnt_youngs_modulus: Optional[float] = None
    burnt_poisson_ratio: Optional[float] = None
    friction_angle: float = 30.0
    rho_solid: float = 1.0
    rho_air: float = 1.0


@dataclass
class FixedTemperatureBox:
    min: list[float]
    max: list[float]
    T: float


@dataclass
class ThermalConfig:
    K_air: float = 0.01
    K_solid: float = 0.1
    cp_air: float = 1.0
    cp_solid: float = 1.0
    T_bar: float = 298.0
    fixed_temperature: list[FixedTemperatureBox] = field(default_factory=list)


@dataclass
class SeedSpec:
    ids: Optional[list[int]] = None
    point: Optional[list[float]] = None
    radius: float = 0.0


@dataclass
class RadialFuelConfig:
    axis_origin: list[float]
    axis_direction: list[float]
    radius: float


@dataclass
class IgnitionConfig:
    F0: float = 1.0
    F_min: float = 0.3
    gamma: float = 1.0
    beta: float = 1.0e3
    T_ignition: float = 600.0
    T_max: float = 1200.0
    c_flame: float = 0.03
    seeds: list[SeedSpec] = field(default_factory=list)


@dataclass
class FluidConfig:
    alpha: float = 0.0
    alpha_flip: float = 0.99
    rho_fluid: float = 1.0
    up_axis: int = 1
    position_update: str = "verbatim"
    pocket_policy: str = "project"
    solid_mass_fraction: float = 0.5


@dataclass
class SmokeConfig:
    per_particle: int = 1
    mass: float = 1.0
    max_age: Optional[float] = None


@dataclass
class SolverConfig:
    cfl_number: float = 0.5
    cg_tol_pressure: float = 1e-6
    cg_tol_diffusion: float = 1e-12
    max_iter: int = 5000
    max_dt: Optional[float] = None
    speed_floor: float = 1e-12
    elastic_cfl: bool = True
    threads: int = 1


@dataclass
class OutputConfig:
    frame_dt: float = 1.0 / 24.0
    frame_count: int = 24
    fields: list[str] = field(default_factory=list)
    csv: bool = False


@dataclass
class ShapeConfig:
    type: str
    min: Optional[list[float]] = None
    max: Optional[list[float]] = None
    center: Optional[list[float]] = None
    radius: Optional[float] = None
    base: Optional[list[float]] = None
    axis: Optional[list[float]] = None
    length: Optional[float] = None
    file: Optional[str] = None
    ppc: Optional[int] = None
    jitter: float = 1.0
    T: Optional[float] = None
    velocity: Optional[list[float]] = None
    fuel0: Optional[float] = None
    gamma: Optional[float] = None
    c_flame: Optional[float] = None
    radial_fuel: Optional[RadialFuelConfig] = None


@dataclass
class SceneConfig:
    dimension: int
    dx: float
    domain: DomainConfig
    geometry: list[ShapeConfig]
    name: str = ""
    seed: int = 0
    gravity: Optional[list[float]] = None
    material: MaterialConfig = field(default_factory=MaterialConfig)
    thermal: ThermalConfig = field(default_factory=ThermalConfig)
    shrink: ShrinkConfig = field(default_factory=ShrinkConfig)
    ignition: IgnitionConfig = field(default_factory=IgnitionConfig)
    fluid: FluidConfig = field(default_factory=FluidConfig)
    smoke: SmokeConfig = field(default_factory=SmokeConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: str = "."

    # derived views -------------------------------------------------------
    @property
    def cells(self) -> tuple[int, ...]:
        return tuple(int(round(e / self.dx)) for e in self.domain.extent)

    def cell_grid(self) -> GridDescriptor:
        return GridDescriptor.for_cells(self.domain.origin, self.dx, self.cells)

    def elastic(self) -> ElasticParams:
        return ElasticParams.from_young(self.material.youngs_modulus, self.material.poisson_ratio)

    def burnt_elastic(self) -> ElasticParams:
        m = self.material
        E = m.youngs_modulus if m.burnt_youngs_modulus is None else m.burnt_youngs_modulus
        nu = m.poisson_ratio if m.burnt_poisson_ratio is None else m.burnt_poisson_ratio
        return ElasticParams.from_young(E, nu)

    def plastic(self) -> PlasticParams:
        return PlasticParams(self.material.friction_angle)

    def ignition_params(self) -> IgnitionParams:
        i = self.ignition
        return IgnitionParams(i.F0, i.F_min, i.gamma, i.beta, i.T_ignition, i.T_max, i.c_flame)

    def fluid_params(self) -> FluidParams:
        f, s = self.fluid, self.solver
        cell_mass = self.material.rho_solid * self.dx ** self.dimension
        return FluidParams(f.alpha, f.alpha_flip, f.rho_fluid, f.up_axis, s.cg_tol_pressure,
                           s.max_iter, f.position_update, f.pocket_policy,
                           f.solid_mass_fraction * cell_mass)

    def thermal_params(self) -> ThermalParams:
        t, m = self.thermal, self.material
        return ThermalParams(t.K_air, t.K_solid, t.cp_air, t.cp_solid, m.rho_air, m.rho_solid,
                             t.T_bar, self.solver.cg_tol_diffusion, self.solver.max_iter)

    def gravity_vector(self) -> np.ndarray:
        return np.zeros(self.dimension) if self.gravity is None else np.asarray(self.gravity, float)

    def wave_speed(self) -> float:
        """Largest dilatational wave speed over both constitutive models."""
        rho = self.material.rho_solid
        return max(math.sqrt((p.lam + 2 * p.mu) / rho) for p in (self.elastic(), self.burnt_elastic()))


# ---------------------------------------------------------------------------
# generic strict loader


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp, path: str):
    origin = get_origin(tp)
    if origin in (Union, getattr(types, "UnionType", Union)):
        args = [a for a in get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        (item,) = get_args(tp)
        return [_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is tuple or tp is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return tuple(_coerce(v, float, f"{path}[{i}]") for i, v in enumerate(value))
    if hasattr(tp, "__dataclass_fields__"):
        return _build(tp, value, path)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported type {_type_name(tp)}")


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'scene'}: expected an object")
    hints = get_type_hints(cls)
    known = {f.name: f for f in fields(cls) if f.init}
    prefix = f"{path}." if path else ""
    for key in data:
        if key not in known or key == "base_dir":
            raise ConfigError(f"{prefix}{key}: unknown key")
    kwargs = {}
    for name, f in known.items():
        if name in data:
            kwargs[name] = _coerce(data[name], hints[name], prefix + name)
        elif f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(f"{prefix}{name}: required field missing")
    try:
        return cls(**kwargs)
    except ValueError as err:
        raise ConfigError(f"{path or 'scene'}: {err}") from err


# ---------------------------------------------------------------------------
# validation


def _vec(v, d, path):
    if v is None or len(v) != d:
        raise ConfigError(f"{path}: expected {d} components")
    return np.asarray(v, float)


def _positive(value, path):
    if not value > 0:
        raise ConfigError(f"{path}: must be positive")


def validate(cfg: SceneConfig) -> None:
    d = cfg.dimension
    if d not in (2, 3):
        raise ConfigError("dimension: must be 2 or 3")
    _positive(cfg.dx, "dx")
    _vec(cfg.domain.origin, d, "domain.origin")
    ext = _vec(cfg.domain.extent, d, "domain.extent")
    for a, e in enumerate(ext):
        n = e / cfg.dx
        if not (n >= 4 and abs(n - round(n)) < 1e-9 * max(1.0, n)):
            raise ConfigError(f"domain.extent[{a}]: must be a multiple (>= 4) of dx")
    if cfg.gravity is not None:
        _vec(cfg.gravity, d, "gravity")
    try:
        cfg.elastic()
        cfg.burnt_elastic()
        cfg.plastic()
    except ValueError as err:
        raise ConfigError(f"material: {err}") from err
    for name in ("rho_solid", "rho_air"):
        _positive(getattr(cfg.material, name), f"material.{name}")
    for name in ("K_air", "K_solid", "cp_air", "cp_solid", "T_bar"):
        _positive(getattr(cfg.thermal, name), f"thermal.{name}")
    for i, box in enumerate(cfg.thermal.fixed_temperature):
        _vec(box.min, d, f"thermal.fixed_temperature[{i}].min")
        _vec(box.max, d, f"thermal.fixed_temperature[{i}].max")
    try:
        cfg.ignition_params()
    except ValueError as err:
        raise ConfigError(f"ignition: {err}") from err
    for i, s in enumerate(cfg.ignition.seeds):
        if (s.ids is None) == (s.point is None):
            raise ConfigError(f"ignition.seeds[{i}]: give exactly one of ids or point")
        if s.point is not None:
            _vec(s.point, d, f"ignition.seeds[{i}].point")
        if s.radius < 0:
            raise ConfigError(f"ignition.seeds[{i}].radius: must be non-negative")
    if cfg.shrink.mode == "anisotropic_cylindrical" and d != 3:
        raise ConfigError("shrink.mode: cylindrical shrinking needs dimension 3")
    if cfg.shrink.mode != "none":
        _vec(cfg.shrink.axis_origin, 3, "shrink.axis_origin") if d == 3 else None
    try:
        cfg.fluid_params()
    except ValueError as err:
        raise ConfigError(f"fluid: {err}") from err
    if not 0 <= cfg.fluid.solid_mass_fraction < 1:
        raise ConfigError("fluid.solid_mass_fraction: must lie in [0, 1)")
    if not 0 <= cfg.fluid.up_axis < d:
        raise ConfigError("fluid.up_axis: out of range")
    if cfg.smoke.per_particle < 0:
        raise ConfigError("smoke.per_particle: must be non-negative")
    _positive(cfg.smoke.mass, "smoke.mass")
    if cfg.smoke.max_age is not None:
        _positive(cfg.smoke.max_age, "smoke.max_age")
    s = cfg.solver
    if not 0 < s.cfl_number <= 1:
        raise ConfigError("solver.cfl_number: must lie in (0, 1]")
    _positive(s.cg_tol_pressure, "solver.cg_tol_pressure")
    _positive(s.cg_tol_diffusion, "solver.cg_tol_diffusion")
    _positive(s.max_iter, "solver.max_iter")
    _positive(s.threads, "solver.threads")
    if s.max_dt is not None:
        _positive(s.max_dt, "solver.max_dt")
    _positive(cfg.output.frame_dt, "output.frame_dt")
    if cfg.output.frame_count < 0:
        raise ConfigError("output.frame_count: must be non-negative")
    for i, name in enumerate(cfg.output.fields):
        if name not in ("T", "u", "labels"):
            raise ConfigError(f"output.fields[{i}]: unknown field {name!r}")
    if not cfg.geometry:
        raise ConfigError("geometry: at least one shape is required")


# ---------------------------------------------------------------------------
# sampling


def default_ppc(d: int) -> int:
    return 4 if d == 2 else 8


def _inside(shape: ShapeConfig, x: np.ndarray, d: int, path: str) -> np.ndarray:
    if shape.type == "box":
        lo, hi = _vec(shape.min, d, f"{path}.min"), _vec(shape.max, d, f"{path}.max")
        return np.all((x >= lo) & (x < hi), axis=1)
    if shape.type == "sphere":
        c = _vec(shape.center, d, f"{path}.center")
        return np.linalg.norm(x - c, axis=1) < shape.radius
    if shape.type == "cylinder":
        base = _vec(shape.base, d, f"{path}.base")
        axis = _vec(shape.axis, d, f"{path}.axis")
        axis = axis / np.linalg.norm(axis)
        rel = x - base
        h = rel @ axis
        r = np.linalg.norm(rel - np.outer(h, axis), axis=1)
        return (h >= 0) & (h < shape.length) & (r < shape.radius)
    raise ConfigError(f"{path}.type: unknown shape {shape.type!r}")


def _bounds(shape: ShapeConfig, d: int, path: str):
    if shape.type == "box":
        return _vec(shape.min, d, f"{path}.min"), _vec(shape.max, d, f"{path}.max")
    if shape.type == "sphere":
        _positive(shape.radius or 0, f"{path}.radius")
        c = _vec(shape.center, d, f"{path}.center")
        return c - shape.radius, c + shape.radius
    if shape.type == "cylinder":
        _positive(shape.radius or 0, f"{path}.radius")
        _positive(shape.length or 0, f"{path}.length")
        base = _vec(shape.base, d, f"{path}.base")
        axis = _vec(shape.axis, d, f"{path}.axis")
        if not np.linalg.norm(axis) > 0:
            raise ConfigError(f"{path}.axis: must be non-zero")
        top = base + shape.length * axis / np.linalg.norm(axis)
        return np.minimum(base, top) - shape.radius, np.maximum(base, top) + shape.radius
    raise ConfigError(f"{path}.type: unknown shape {shape.type!r}")


def sample_shape(shape: ShapeConfig, cfg: SceneConfig, rng: np.random.Generator, path: str) -> np.ndarray:
    """Stratified, jittered particle positions filling ``shape``."""
    d, dx = cfg.dimension, cfg.dx
    if shape.type == "points":
        if not shape.file:
            raise ConfigError(f"{path}.file: required for point clouds")
        f = Path(shape.file)
        f = f if f.is_absolute() else Path(cfg.base_dir) / f
        try:
            pts = np.load(f) if f.suffix == ".npy" else np.loadtxt(f, delimiter=",", ndmin=2)
        except OSError as err:
            raise ConfigError(f"{path}.file: cannot read {f}: {err}") from err
        pts = np.asarray(pts, float)
        if pts.ndim != 2 or pts.shape[1] != d:
            raise ConfigError(f"{path}.file: expected an (N, {d}) array")
        return pts
    ppc = shape.ppc or default_ppc(d)
    if ppc < 1:
        raise ConfigError(f"{path}.ppc: must be at least 1")
    if not 0 <= shape.jitter <= 1:
        raise ConfigError(f"{path}.jitter: must lie in [0, 1]")
    lo, hi = _bounds(shape, d, path)
    origin = np.asarray(cfg.domain.origin, float)
    c0 = np.floor((lo - origin) / dx).astype(int)
    c1 = np.ceil((hi - origin) / dx).astype(int)
    side = round(ppc ** (1.0 / d))
    cells = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(c0, c1)], indexing="ij"), -1).reshape(-1, d)
    if side ** d == ppc:
        sub = np.stack(np.meshgrid(*[np.arange(side)] * d, indexing="ij"), -1).reshape(-1, d)
        base = (cells[:, None, :] + (sub[None] + 0.5) / side).reshape(-1, d)
        jit = (rng.random(base.shape) - 0.5) * shape.jitter / side
    else:
        base = np.repeat(cells, ppc, axis=0) + 0.5
        jit = (rng.random(base.shape) - 0.5) * shape.jitter
    x = origin + (base + jit) * dx
    return x[_inside(shape, x, d, path)]


def build_particles(cfg: SceneConfig) -> MpmParticles:
    """Sample every shape, assign per-shape material data and ignite the seeds."""
    d, dx = cfg.dimension, cfg.dx
    rng = np.random.default_rng(cfg.seed)
    ign = cfg.ignition
    parts = []
    for i, shape in enumerate(cfg.geometry):
        path = f"geometry[{i}]"
        x = sample_shape(shape, cfg, rng, path)
        if x.shape[0] == 0:
            raise ConfigError(f"{path}: shape produced no particles")
        ppc = shape.ppc or default_ppc(d)
        V0 = dx ** d / ppc
        if shape.radial_fuel is not None:
            rf = shape.radial_fuel
            _positive(rf.radius, f"{path}.radial_fuel.radius")
            fuel0 = radial_fuel(x, _vec(rf.axis_origin, d, f"{path}.radial_fuel.axis_origin"),
                                _vec(rf.axis_direction, d, f"{path}.radial_fuel.axis_direction"), rf.radius)
        else:
            fuel0 = ign.F0 if shape.fuel0 is None else shape.fuel0
        gamma = ign.gamma if shape.gamma is None else shape.gamma
        c_flame = ign.c_flame if shape.c_flame is None else shape.c_flame
        if np.any(np.asarray(fuel0) <= ign.F_min):
            raise ConfigError(f"{path}: initial fuel must exceed F_min")
        _positive(gamma, f"{path}.gamma")
        _positive(c_flame, f"{path}.c_flame")
        v = None if shape.velocity is None else _vec(shape.velocity, d, f"{path}.velocity")
        T = cfg.thermal.T_bar if shape.T is None else shape.T
        parts.append(MpmParticles.create(x, m=cfg.material.rho_solid * V0, V0=V0, T=T, fuel0=fuel0,
                                         gamma=gamma, c_flame=c_flame, v=v))
    p = parts[0]
    for q in parts[1:]:
        p = type(p)(**{k: np.concatenate([a, getattr(q, k)]) for k, a in p.arrays().items()})
    lo, hi = quadratic_valid_bounds(cfg.cell_grid())
    outside = np.any((p.x < lo) | (p.x >= hi), axis=1)
    if np.any(outside):
        raise ConfigError(f"geometry: {int(outside.sum())} particles lie outside the domain interior "
                          f"(keep shapes at least one cell away from the walls)")
    for i, s in enumerate(ign.seeds):
        try:
            ids = select_seed_particles(p.x, s.ids, s.point, s.radius)
        except ValueError as err:
            raise ConfigError(f"ignition.seeds[{i}]: {err}") from err
        seed_ignition(p, ids, ign.T_ignition)
    return p


def scene_from_dict(data: dict, base_dir=".") -> SceneConfig:
    cfg = _build(SceneConfig, data, "")
    cfg.base_dir = str(base_dir)
    validate(cfg)
    return cfg


def load_scene(path) -> tuple[SceneConfig, MpmParticles]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as err:
        raise ConfigError(f"cannot read scene {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    cfg = scene_from_dict(data, path.parent)
    return cfg, build_particles(cfg)
