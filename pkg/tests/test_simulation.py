import dataclasses
import json

import numpy as np
import pytest

from thermompm.config import build_particles, scene_from_dict
from thermompm.frames import read_frame
from thermompm.particles import BurnState
from thermompm.simulation import Simulation, SimulationError, load_checkpoint, save_checkpoint

SMALL = {
    "dimension": 2,
    "dx": 0.0625,
    "domain": {"origin": [0.0, 0.0], "extent": [1.0, 1.0]},
    "seed": 4,
    "gravity": [0.0, 0.0],
    "material": {"youngs_modulus": 1.0},
    "ignition": {"beta": 1e10, "c_flame": 0.1, "seeds": [{"point": [0.5, 0.265625], "radius": 0.02}]},
    "fluid": {"alpha": 0.01},
    "smoke": {"per_particle": 2, "mass": 0.001},
    "solver": {"max_dt": 0.0125},
    "output": {"frame_dt": 0.025, "frame_count": 3, "fields": ["T", "u", "labels"]},
    "geometry": [{"type": "box", "min": [0.25, 0.25], "max": [0.75, 0.5], "jitter": 0.0}],
}


def make(data=SMALL):
    cfg = scene_from_dict(json.loads(json.dumps(data)))
    sim = Simulation(cfg)
    return sim, sim.initial_state(build_particles(cfg))


def test_compute_dt_rules():
    sim, st = make({**SMALL, "solver": {"elastic_cfl": False}})
    assert sim.compute_dt(st, 0.04) == 0.04
    st.mpm.v[0] = [3.0, 4.0]
    assert sim.compute_dt(st, 0.04) == pytest.approx(0.5 * 0.0625 / 5.0)
    sim, st = make()
    assert sim.compute_dt(st, 1.0) == pytest.approx(min(0.0125, 0.5 * 0.0625 / sim.wave_speed))


def test_first_step_burning_and_smoke():
    sim, st = make()
    seeded = np.nonzero(st.mpm.state == BurnState.B)[0]
    assert seeded.size == 2
    stats = sim.step(st, 0.01)
    assert np.nonzero(st.mpm.state == BurnState.B)[0].tolist() == seeded.tolist()
    assert stats.smoke_emitted == 2 * seeded.size
    assert st.time == 0.01 and st.step == 1


def test_frames_land_exactly():
    sim, st = make()
    for k in range(1, 4):
        fs = sim.advance_frame(st)
        assert st.time == k * 0.025 and st.frame == k
        assert fs.steps >= 2


def test_run_writes_frames_and_summary(tmp_path):
    sim, st = make()
    summary = sim.run(st, tmp_path)
    names = sorted(p.name for p in tmp_path.glob("frame_*.bin"))
    assert names == [f"frame_{i:06d}.bin" for i in range(4)]
    rec = read_frame(tmp_path / "frame_000003.bin")
    assert rec.T_field.shape == (16, 16) and rec.u_field.shape == (17, 17, 2)
    assert rec.mpm_x.shape[0] == len(st.mpm) and rec.smoke_x.shape[0] == len(st.smoke)
    on_disk = json.loads((tmp_path / "summary.json").read_text())
    assert on_disk == json.loads(json.dumps(summary))
    for key in ("steps", "pressure_iterations", "diffusion_iterations", "smoke_emitted"):
        assert summary["totals"][key] == sum(f[key] for f in summary["frames"])
    assert summary["totals"]["wall_time"] == pytest.approx(sum(f["wall_time"] for f in summary["frames"]))


def test_zero_frames_writes_initial_state(tmp_path):
    sim, st = make()
    summary = sim.run(st, tmp_path, frames=0)
    assert [p.name for p in tmp_path.glob("*.bin")] == ["frame_000000.bin"]
    assert summary["totals"]["frames"] == 0


def test_deterministic_and_resume_identical(tmp_path):
    sim, st = make()
    sim.run(st, tmp_path / "a")
    sim2, st2 = make()
    sim2.run(st2, tmp_path / "b")
    sim3, st3 = make()
    sim3.run(st3, tmp_path / "c", frames=1, checkpoint=tmp_path / "ck.npz")
    resumed = load_checkpoint(tmp_path / "ck.npz", sim3)
    assert resumed.frame == 1 and resumed.mpm.equal(st3.mpm)
    sim3.run(resumed, tmp_path / "c")
    for i in range(4):
        a = (tmp_path / "a" / f"frame_{i:06d}.bin").read_bytes()
        assert a == (tmp_path / "b" / f"frame_{i:06d}.bin").read_bytes()
        assert a == (tmp_path / "c" / f"frame_{i:06d}.bin").read_bytes()
    assert st.mpm.equal(resumed.mpm) and st.smoke.equal(resumed.smoke)


def test_checkpoint_grid_mismatch(tmp_path):
    sim, st = make()
    save_checkpoint(tmp_path / "ck.npz", st)
    other = Simulation(scene_from_dict({**SMALL, "domain": {"origin": [0, 0], "extent": [1.0, 1.25]}}))
    with pytest.raises(ValueError, match="grid"):
        load_checkpoint(tmp_path / "ck.npz", other)


def test_failure_reports_stage_and_frames(tmp_path):
    sim, st = make()
    sim.thermal = dataclasses.replace(sim.thermal, max_iter=1)
    with pytest.raises(SimulationError) as err:
        sim.run(st, tmp_path)
    assert err.value.stage == "thermal"
    assert err.value.summary["completed_frame"] == 0
    assert json.loads((tmp_path / "summary.json").read_text())["failed"]


def test_smoke_age_culling():
    data = {**SMALL, "smoke": {"per_particle": 1, "mass": 0.001, "max_age": 0.02}}
    sim, st = make(data)
    for _ in range(6):
        sim.step(st, 0.01)
    assert np.all(st.time - st.smoke.birth_time <= 0.02 + 1e-12)


def test_invariants_over_a_short_burn():
    sim, st = make()
    prev_state = st.mpm.state.copy()
    prev_fuel = st.mpm.fuel.copy()
    for _ in range(3):
        sim.advance_frame(st)
        assert np.all(st.mpm.state >= prev_state)
        assert np.all(st.mpm.fuel <= prev_fuel) and np.all(st.mpm.fuel > 0)
        assert st.mpm.T.max() <= sim.ignition.T_max
        assert np.all(np.linalg.det(st.mpm.F) > 0)
        prev_state, prev_fuel = st.mpm.state.copy(), st.mpm.fuel.copy()
