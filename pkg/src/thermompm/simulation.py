"""Time stepping: one coupled step runs the solid, air, heat and combustion
stages in order; ``run`` strings steps into frames with output and
checkpoints.
"""

from __future__ import annotations

import json
import logging
import time as _time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import SceneConfig
from .fluid_solver import FluidState, ProjectionInfo, default_domain_bcs, fluid_step
from .frames import frame_name, make_record, write_csv, write_frame
from .grid_core import hash_build
from .ignition import ignition_step
from .mpm_solver import (
    apply_anisotropic_shrinking,
    apply_isotropic_shrinking,
    apply_plasticity,
    build_particle_level_set,
    combustible_mask,
    find_boundary_particles,
    g2p,
    grid_forces,
    grid_update,
    p2g,
    sample_smoke,
    update_constitutive_model,
)
from .particles import MpmParticles, SmokeParticles
from .thermal_solver import thermal_step

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class SimulationError(RuntimeError):
    """A solver stage failed; carries the step number and stage name."""

    def __init__(self, step: int, stage: str, cause: Exception):
        super().__init__(f"step {step} ({stage}): {cause}")
        self.step = step
        self.stage = stage
        self.cause = cause


@dataclass
class SimState:
    time: float
    step: int
    frame: int
    mpm: MpmParticles
    smoke: SmokeParticles
    fluid: FluidState
    T_air: np.ndarray
    T_grid: np.ndarray

    def copy(self) -> "SimState":
        f = self.fluid
        return SimState(self.time, self.step, self.frame, self.mpm.copy(), self.smoke.copy(),
                        FluidState(f.cells, f.corners, f.u.copy(), f.p.copy(), f.labels.copy()),
                        self.T_air.copy(), self.T_grid.copy())


@dataclass
class StepStats:
    dt: float = 0.0
    pressure_iterations: int = 0
    diffusion_iterations: int = 0
    pockets: int = 0
    smoke_emitted: int = 0
    smoke_culled: int = 0
    ignited: int = 0
    burnt: int = 0
    switched: int = 0
    max_displacement: float = 0.0
    projection: ProjectionInfo | None = None


@dataclass
class FrameStats:
    frame: int
    steps: int = 0
    wall_time: float = 0.0
    pressure_iterations: int = 0
    diffusion_iterations: int = 0
    smoke_emitted: int = 0
    mpm_count: int = 0
    smoke_count: int = 0
    burning: int = 0
    burnt: int = 0


class Simulation:
    """Scene-level context: derived parameters and the stepping logic."""

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        self.cells = cfg.cell_grid()
        self.origin = np.asarray(cfg.domain.origin, float)
        self.fcr = cfg.elastic()
        self.hencky = cfg.burnt_elastic()
        self.plastic = cfg.plastic()
        self.ignition = cfg.ignition_params()
        self.fluid = cfg.fluid_params()
        self.thermal = cfg.thermal_params()
        self.gravity = cfg.gravity_vector()
        self.base_labels = default_domain_bcs(self.cells, cfg.fluid.up_axis)
        self.fixed_mask, self.fixed_values = self._fixed_temperature()
        self.wave_speed = cfg.wave_speed() if cfg.solver.elastic_cfl else 0.0

    def _fixed_temperature(self):
        boxes = self.cfg.thermal.fixed_temperature
        if not boxes:
            return None, None
        pos = self.cells.all_node_positions()
        mask = np.zeros(self.cells.dims, bool)
        vals = np.full(self.cells.dims, self.cfg.thermal.T_bar)
        for b in boxes:
            inside = np.all((pos >= np.asarray(b.min)) & (pos <= np.asarray(b.max)), axis=-1)
            mask |= inside
            vals[inside] = b.T
        return mask, vals

    # ------------------------------------------------------------------
    def initial_state(self, particles: MpmParticles) -> SimState:
        d = self.cfg.dimension
        fluid = FluidState.at_rest(self.origin, self.cfg.dx, self.cells.dims)
        fluid.labels = self.base_labels.copy()
        T = np.full(self.cells.dims, self.cfg.thermal.T_bar)
        if self.fixed_mask is not None:
            T[self.fixed_mask] = self.fixed_values[self.fixed_mask]
        return SimState(0.0, 0, 0, particles.copy(), SmokeParticles.empty(d), fluid, T, T.copy())

    def compute_dt(self, state: SimState, remaining: float) -> float:
        """CFL-limited step size, never past the end of the current frame.

        The speed is the largest of the particle, smoke and air velocities,
        the elastic wave speed (explicit elasticity), and a small floor.
        """
        s = self.cfg.solver
        vmax = 0.0
        for a in (state.mpm.v, state.smoke.v, state.fluid.u):
            if a.size:
                vmax = max(vmax, float(np.sqrt(np.max(np.sum(a * a, axis=-1)))))
        if len(state.mpm):
            vmax += self.wave_speed
        speed = max(vmax, s.speed_floor)
        dt = min(remaining, s.cfl_number * self.cfg.dx / speed)
        if s.max_dt is not None:
            dt = min(dt, s.max_dt)
        return dt

    # ------------------------------------------------------------------
    def step(self, state: SimState, dt: float, t_next: float | None = None) -> StepStats:
        """Advance ``state`` in place by ``dt``."""
        cfg = self.cfg
        stats = StepStats(dt=dt)
        t_now = state.time + dt if t_next is None else t_next
        n = state.step
        stage = "mpm"
        try:
            mpm = state.mpm
            x_before = mpm.x.copy()
            grid = p2g(mpm, self.cells, cfg.solver.threads)
            if cfg.shrink.mode == "isotropic":
                apply_isotropic_shrinking(mpm, dt, cfg.shrink)
            elif cfg.shrink.mode == "anisotropic_cylindrical":
                apply_anisotropic_shrinking(mpm, dt, cfg.shrink, cfg.dx)
            apply_plasticity(mpm, self.hencky, self.plastic)
            grid_forces(mpm, grid, self.fcr, self.hencky, self.gravity, cfg.solver.threads)
            grid_update(grid, dt)
            g2p(grid, mpm, dt)
            if len(mpm):
                stats.max_displacement = float(np.max(np.linalg.norm(mpm.x - x_before, axis=1)))
            stats.switched = update_constitutive_model(mpm)

            stage = "boundary"
            comb = np.nonzero(combustible_mask(mpm))[0]
            h = hash_build(mpm.x[comb], cfg.dx, self.origin, comb)
            boundary_ids = comb[find_boundary_particles(mpm.x[comb], h)]

            stage = "smoke emission"
            smoke = state.smoke
            if cfg.smoke.max_age is not None and len(smoke):
                keep = (t_now - smoke.birth_time) <= cfg.smoke.max_age
                stats.smoke_culled = int(np.count_nonzero(~keep))
                smoke = smoke.subset(keep)
            new = sample_smoke(mpm, boundary_ids, cfg.smoke.per_particle, cfg.dx, self.origin,
                               self.ignition.T_ignition, cfg.smoke.mass, self.ignition.F0, t_now,
                               cfg.seed, n)
            stats.smoke_emitted = len(new)
            smoke = smoke.extend(new)

            stage = "fluid"
            fluid, smoke, pinfo = fluid_step(state.fluid, smoke, grid, state.T_air,
                                             self.thermal.T_bar, self.fluid, dt, self.base_labels)
            stats.pressure_iterations = pinfo.iterations
            stats.pockets = pinfo.pockets
            stats.projection = pinfo

            stage = "thermal"
            phi = build_particle_level_set(mpm.x, self.cells).to_dense()
            res = thermal_step(state.T_air, fluid.u, self.cells, mpm, smoke, phi, self.thermal, dt,
                               self.fixed_mask, self.fixed_values)
            stats.diffusion_iterations = res.info.iterations

            stage = "ignition"
            rep = ignition_step(mpm, smoke, boundary_ids, t_now, dt, self.ignition, cfg.dx, self.origin)
            stats.ignited = rep.started
            stats.burnt = rep.burnt
        except Exception as err:  # noqa: BLE001 - re-raised with context
            raise SimulationError(n, stage, err) from err

        if stats.max_displacement > cfg.solver.cfl_number * cfg.dx * (1 + 1e-9):
            logger.warning("step %d: particle moved %.3g > cfl*dx = %.3g", n, stats.max_displacement,
                           cfg.solver.cfl_number * cfg.dx)
        state.smoke = smoke
        state.fluid = fluid
        state.T_air = res.T_fluid
        state.T_grid = res.T_merged
        state.time = t_now
        state.step = n + 1
        return stats

    def advance_frame(self, state: SimState) -> FrameStats:
        """Step until the next frame boundary, landing on it exactly."""
        frame_dt = self.cfg.output.frame_dt
        target = (state.frame + 1) * frame_dt
        fs = FrameStats(frame=state.frame + 1)
        t0 = _time.perf_counter()
        while state.time < target:
            remaining = target - state.time
            dt = self.compute_dt(state, remaining)
            last = dt >= remaining * (1 - 1e-12)
            st = self.step(state, remaining if last else dt, target if last else None)
            fs.steps += 1
            fs.pressure_iterations += st.pressure_iterations
            fs.diffusion_iterations += st.diffusion_iterations
            fs.smoke_emitted += st.smoke_emitted
            logger.debug("step %d t=%.6g dt=%.3g p_it=%d T_it=%d smoke=%d", state.step, state.time,
                         st.dt, st.pressure_iterations, st.diffusion_iterations, len(state.smoke))
        state.frame += 1
        fs.wall_time = _time.perf_counter() - t0
        fs.mpm_count = len(state.mpm)
        fs.smoke_count = len(state.smoke)
        fs.burning = int(np.count_nonzero(state.mpm.state == 2))
        fs.burnt = int(np.count_nonzero(state.mpm.state == 3))
        return fs

    # ------------------------------------------------------------------
    def write_output(self, state: SimState, out_dir: Path) -> None:
        flds = set(self.cfg.output.fields)
        rec = make_record(state.mpm, state.smoke,
                          T_field=state.T_grid if "T" in flds else None,
                          u_field=state.fluid.u if "u" in flds else None,
                          labels=state.fluid.labels if "labels" in flds else None)
        write_frame(out_dir / frame_name(state.frame), rec)
        if self.cfg.output.csv:
            write_csv(out_dir / frame_name(state.frame).replace(".bin", ".csv"), rec)

    def run(self, state: SimState, out_dir=None, frames: int | None = None,
            checkpoint=None, progress=None) -> dict:
        """Advance ``frames`` frames (default: the configured count) from ``state``.

        Writes a frame file per frame when ``out_dir`` is given, plus
        ``summary.json``; a checkpoint is refreshed after every frame when a
        path is given.  On failure the partial summary is attached to the
        raised ``SimulationError`` as ``summary``.
        """
        total = self.cfg.output.frame_count if frames is None else frames
        out = None if out_dir is None else Path(out_dir)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            if state.frame == 0:
                self.write_output(state, out)
        per_frame: list[FrameStats] = []
        try:
            while state.frame < total:
                fs = self.advance_frame(state)
                per_frame.append(fs)
                if out is not None:
                    self.write_output(state, out)
                if checkpoint is not None:
                    save_checkpoint(checkpoint, state)
                logger.info("frame %d: %d steps, %.2fs, %d smoke, %d burning", fs.frame, fs.steps,
                            fs.wall_time, fs.smoke_count, fs.burning)
                if progress is not None:
                    progress(fs)
        except SimulationError as err:
            err.summary = summarize(self.cfg, per_frame, state, failed=str(err))
            if out is not None:
                (out / "summary.json").write_text(json.dumps(err.summary, indent=2))
            raise
        summary = summarize(self.cfg, per_frame, state)
        if out is not None:
            (out / "summary.json").write_text(json.dumps(summary, indent=2))
        return summary


def summarize(cfg: SceneConfig, per_frame: list[FrameStats], state: SimState, failed=None) -> dict:
    frames = [asdict(f) for f in per_frame]
    keys = ("steps", "wall_time", "pressure_iterations", "diffusion_iterations", "smoke_emitted")
    totals = {k: sum(f[k] for f in frames) for k in keys}
    totals["frames"] = len(frames)
    totals["seconds_per_frame"] = totals["wall_time"] / len(frames) if frames else 0.0
    return {"scene": cfg.name, "completed_frame": state.frame, "time": state.time,
            "failed": failed, "totals": totals, "frames": frames}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: SimState) -> None:
    arrays = {f"mpm_{k}": v for k, v in state.mpm.arrays().items()}
    arrays.update({f"smoke_{k}": v for k, v in state.smoke.arrays().items()})
    arrays.update(fluid_u=state.fluid.u, fluid_p=state.fluid.p, fluid_labels=state.fluid.labels,
                  T_air=state.T_air, T_grid=state.T_grid)
    meta = {"version": CHECKPOINT_VERSION, "time": state.time, "step": state.step, "frame": state.frame}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_checkpoint(path, sim: Simulation) -> SimState:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        mpm = MpmParticles(**{f: z[f"mpm_{f}"] for f in MpmParticles.__dataclass_fields__})
        smoke = SmokeParticles(**{f: z[f"smoke_{f}"] for f in SmokeParticles.__dataclass_fields__})
        fluid = FluidState(sim.cells, FluidState.at_rest(sim.origin, sim.cfg.dx, sim.cells.dims).corners,
                           z["fluid_u"], z["fluid_p"], z["fluid_labels"])
        state = SimState(float(meta["time"]), int(meta["step"]), int(meta["frame"]), mpm, smoke, fluid,
                         z["T_air"], z["T_grid"])
    if fluid.u.shape[:-1] != tuple(n + 1 for n in sim.cells.dims):
        raise ValueError(f"{path}: checkpoint grid does not match the scene")
    return state

