import copy
import json

import numpy as np
import pytest

from thermompm.config import ConfigError, build_particles, load_scene, scene_from_dict
from thermompm.particles import BurnState

BASE = {
    "dimension": 2,
    "dx": 0.1,
    "domain": {"origin": [0.0, 0.0], "extent": [1.0, 1.0]},
    "geometry": [{"type": "box", "min": [0.3, 0.3], "max": [0.7, 0.5]}],
}


def scene(**changes):
    data = copy.deepcopy(BASE)
    data.update(changes)
    return data


def test_defaults_and_counts():
    cfg = scene_from_dict(scene())
    assert cfg.cells == (10, 10)
    assert cfg.solver.cfl_number == 0.5 and cfg.fluid.alpha_flip == 0.99
    p = build_particles(cfg)
    assert len(p) == 8 * 4  # 4 x 2 cells, 4 per cell
    np.testing.assert_allclose(p.V0, 0.01 / 4)
    np.testing.assert_allclose(p.m, 0.01 / 4)
    assert np.all(p.T == 298.0)


@pytest.mark.parametrize("data, path", [
    (scene(solver={"cfl": 0.4}), "solver.cfl"),
    (scene(ignition={"seeds": [{"point": [0.5, 0.3], "radiu": 0.1}]}), "ignition.seeds[0].radiu"),
    (scene(dx="0.1"), "dx"),
    (scene(bogus=1), "bogus"),
    (scene(ignition={"F_min": 0.3, "F0": 0.2}), "ignition"),
    (scene(domain={"origin": [0, 0], "extent": [1.05, 1.0]}), "domain.extent[0]"),
    (scene(solver={"cfl_number": 1.5}), "solver.cfl_number"),
    (scene(shrink={"mode": "isotropic", "T_evap": 500.0, "T_max": 400.0}), "shrink"),
    (scene(output={"fields": ["pressure"]}), "output.fields[0]"),
])
def test_rejections_name_the_field(data, path):
    with pytest.raises(ConfigError) as err:
        scene_from_dict(data)
    assert str(err.value).startswith(path)


def test_missing_required_field():
    data = scene()
    del data["dx"]
    with pytest.raises(ConfigError, match="^dx: required"):
        scene_from_dict(data)


def test_shapes_outside_domain_rejected():
    cfg = scene_from_dict(scene(geometry=[{"type": "box", "min": [0.0, 0.3], "max": [0.4, 0.5]}]))
    with pytest.raises(ConfigError, match="outside"):
        build_particles(cfg)


def test_sampling_is_deterministic_and_inside_shapes():
    data = scene(geometry=[{"type": "sphere", "center": [0.5, 0.5], "radius": 0.2},
                           {"type": "cylinder", "base": [0.2, 0.15], "axis": [1, 0], "length": 0.6,
                            "radius": 0.03}])
    a = build_particles(scene_from_dict(data))
    b = build_particles(scene_from_dict(data))
    assert a.equal(b)
    c = build_particles(scene_from_dict({**data, "seed": 99}))
    assert not np.array_equal(a.x, c.x)
    assert len(a) > 0


def test_seeds_and_overrides():
    data = scene(ignition={"T_ignition": 650.0, "seeds": [{"point": [0.5, 0.3], "radius": 0.06}]},
                 geometry=[{"type": "box", "min": [0.3, 0.3], "max": [0.7, 0.5], "jitter": 0.0,
                            "gamma": 10.0, "c_flame": 0.1, "T": 310.0}])
    p = build_particles(scene_from_dict(data))
    burning = p.state == BurnState.B
    assert burning.sum() == 2
    assert np.all(p.T[burning] == 650.0) and np.all(p.T[~burning] == 310.0)
    assert np.all(p.gamma == 10.0) and np.all(p.c_flame == 0.1)
    with pytest.raises(ConfigError, match=r"ignition.seeds\[0\]"):
        build_particles(scene_from_dict(scene(ignition={"seeds": [{"point": [0.9, 0.9], "radius": 0.05}]})))


def test_points_file(tmp_path):
    pts = np.array([[0.4, 0.4], [0.5, 0.45]])
    np.save(tmp_path / "pts.npy", pts)
    data = scene(geometry=[{"type": "points", "file": "pts.npy", "ppc": 1}])
    (tmp_path / "s.json").write_text(json.dumps(data))
    cfg, p = load_scene(tmp_path / "s.json")
    np.testing.assert_array_equal(p.x, pts)
    np.testing.assert_allclose(p.V0, 0.01)


def test_load_errors(tmp_path):
    f = tmp_path / "bad.json"
    f.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_scene(f)
    with pytest.raises(ConfigError, match="cannot read"):
        load_scene(tmp_path / "missing.json")


@pytest.mark.parametrize("name", ["squares", "ambient", "heated_floor_3d", "log", "incense", "match"])
def test_shipped_scenes_load(name, scene_dir):
    cfg, p = load_scene(scene_dir / f"{name}.json")
    assert cfg.name == name and len(p) > 0


def test_squares_scene_matches_reported_setup(scene_dir):
    cfg, p = load_scene(scene_dir / "squares.json")
    assert cfg.dimension == 2 and cfg.dx == 1 / 16
    assert 900 <= len(p) <= 1100
    gammas = sorted({float(g) for g in p.gamma})
    flames = sorted({float(c) for c in p.c_flame})
    assert gammas == [1.0, 10.0] and flames == [0.03, 0.1]
    assert cfg.ignition.F0 == 1.0 and cfg.ignition.F_min == 0.3
