import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thermompm.fluid_solver import (
    DIRICHLET,
    FLUID,
    NEUMANN,
    SOLID,
    CompatibilityError,
    FluidParams,
    FluidState,
    advect_smoke_particles,
    advect_velocity,
    apply_buoyancy,
    backtrace_rk3,
    constrained_corners,
    default_domain_bcs,
    divergence,
    flip_p2g,
    fluid_step,
    interpolate_linear,
    interpolate_monotonic_cubic,
    mark_solid_cells,
    pressure_solve,
)
from thermompm.grid_core import GridDescriptor
from thermompm.mpm_solver import p2g
from thermompm.particles import MpmParticles, SmokeParticles
from oracles import dense_projection_oracle, face_normal_velocity


def smoke_at(x, v=None, m=1.0):
    x = np.atleast_2d(np.asarray(x, float))
    n, d = x.shape
    s = SmokeParticles.empty(d).extend(SmokeParticles(
        x=x, v=np.zeros((n, d)) if v is None else np.atleast_2d(np.asarray(v, float)),
        m=np.full(n, m), T=np.full(n, 600.0), gradT=np.zeros((n, d)), fuel=np.ones(n),
        fuel0=np.ones(n), birth_time=np.zeros(n)))
    return s


def test_default_bcs_single_neumann_face():
    g = GridDescriptor.for_cells([0, 0, 0], 0.1, (5, 6, 7))
    lab = default_domain_bcs(g, up_axis=2)
    assert np.all(lab[:, :, 0] == NEUMANN)
    assert not np.any(lab[:, :, 1:] == NEUMANN)
    assert np.all(lab[1:-1, 1:-1, 1:-1] == FLUID)
    assert np.all(lab[:, :, -1] == DIRICHLET) and np.all(lab[0, :, 1:] == DIRICHLET)


def test_mark_solid_cells_rules():
    g = GridDescriptor.for_cells([0, 0, 0], 0.1, (6, 6, 6))
    lab = np.full(g.dims, FLUID, dtype=np.int8)
    out, vel = mark_solid_cells(lab, None)
    assert not np.any(out == SOLID)
    p = MpmParticles.create(g.node_position([[3, 3, 3]]), m=2.0, V0=1e-3, T=300.0, fuel0=1,
                            gamma=1, c_flame=1, v=[1.0, 0.0, 0.0])
    st_ = p2g(p, g)
    keep = st_.node_indices() == np.array([3, 3, 3])
    st_.mass[~np.all(keep, axis=1)] = 0.0  # a single massive node
    out, vel = mark_solid_cells(lab, st_)
    assert np.count_nonzero(out == SOLID) == 1 and out[3, 3, 3] == SOLID
    np.testing.assert_allclose(vel[3, 3, 3], [1.0, 0.0, 0.0])
    fixed, fv = constrained_corners(out, vel)
    assert fixed.sum() == 8
    for a in range(3):
        for side in (0, 1):
            assert face_normal_velocity(fv, (3, 3, 3), a, side) == pytest.approx(1.0 if a == 0 else 0.0)


def test_mark_solid_cells_mass_threshold():
    g = GridDescriptor.for_cells([0, 0], 0.1, (8, 8))
    p = MpmParticles.create(g.node_position([[4, 4]]), m=1.0, V0=1e-3, T=300.0, fuel0=1,
                            gamma=1, c_flame=1)
    st_ = p2g(p, g)
    lab = np.full(g.dims, FLUID, dtype=np.int8)
    every, _ = mark_solid_cells(lab, st_)
    assert np.count_nonzero(every == SOLID) == 9  # full quadratic stencil
    heavy, _ = mark_solid_cells(lab, st_, min_mass=0.5)
    assert np.argwhere(heavy == SOLID).tolist() == [[4, 4]]


@pytest.mark.parametrize("with_solid", [False, True])
def test_projection_matches_dense_oracle(with_solid):
    rng = np.random.default_rng(5 + with_solid)
    g = GridDescriptor.for_cells([0, 0, 0], 0.25, (6, 6, 6))
    labels = np.full(g.dims, DIRICHLET, dtype=np.int8)
    labels[1:-1, 1:-1, 1:-1] = FLUID
    labels[:, 0, :] = NEUMANN
    vel = np.zeros((*g.dims, 3))
    if with_solid:
        labels[2, 3, 2] = SOLID
        vel[2, 3, 2] = [0.3, -0.1, 0.2]
    fixed, fv = constrained_corners(labels, vel)
    u_star = rng.normal(size=(7, 7, 7, 3))
    p, u_new, info = pressure_solve(u_star, labels, fixed, fv, 1.3, g.dx, 0.05, tol=1e-14, max_iter=5000)
    ref = dense_projection_oracle(u_star, labels, fixed, fv, 1.3, g.dx, 0.05)
    assert np.abs(p - ref).max() <= 1e-10 * np.abs(ref).max()
    assert info.iterations > 0


@pytest.mark.parametrize("dims", [(12, 12), (10, 10, 10)])
def test_projection_divergence_bound(dims):
    rng = np.random.default_rng(len(dims))
    d = len(dims)
    g = GridDescriptor.for_cells(np.zeros(d), 0.1, dims)
    labels = default_domain_bcs(g)
    vel = np.zeros((*dims, d))
    blk = (slice(4, 7),) * d
    labels[blk] = SOLID
    vel[blk] = rng.normal(size=d) * 0.0
    fixed, fv = constrained_corners(labels, vel)
    u_star = rng.normal(size=(*[n + 1 for n in dims], d))
    p, u_new, _ = pressure_solve(u_star, labels, fixed, fv, 1.0, g.dx, 0.01, tol=1e-6)
    div = divergence(u_new, g.dx)[labels == FLUID]
    assert np.abs(div).max() <= 1e-5 * np.abs(u_star).max() / g.dx
    # static block: no flow through any block face
    for cell in itertools.product(*[range(4, 7)] * d):
        for a in range(d):
            for side in (0, 1):
                assert face_normal_velocity(u_new, cell, a, side) == 0.0
    # projecting again is (nearly) a no-op
    _, u_again, _ = pressure_solve(u_new, labels, fixed, fv, 1.0, g.dx, 0.01, tol=1e-6)
    assert np.abs(u_again - u_new).max() <= 10 * 1e-6 * np.abs(u_new).max()


def test_divergence_free_input_is_fixed_point():
    g = GridDescriptor.for_cells([0, 0], 0.1, (10, 10))
    labels = default_domain_bcs(g)
    fixed, fv = constrained_corners(labels, np.zeros((10, 10, 2)))
    u = np.zeros((11, 11, 2))
    u[..., 0] = 0.7  # horizontal shear-free flow over the closed floor
    u[fixed] = 0.0
    p, u_new, _ = pressure_solve(u, labels, fixed, fv, 1.0, g.dx, 0.01)
    assert np.abs(u_new - u).max() <= 10 * 1e-6 * 0.7


def test_pocket_compatibility():
    g = GridDescriptor.for_cells([0, 0], 0.1, (10, 10))
    labels = default_domain_bcs(g)
    labels[3:8, 3:8] = SOLID
    labels[4:7, 4:7] = FLUID      # air pocket sealed inside the solid
    vel = np.zeros((10, 10, 2))
    fixed, fv = constrained_corners(labels, vel)
    u = np.random.default_rng(0).normal(size=(11, 11, 2))
    p, u_new, info = pressure_solve(u, labels, fixed, fv, 1.0, g.dx, 0.01)
    assert info.pockets >= 1
    div = divergence(u_new, g.dx)
    assert np.abs(div[4:7, 4:7]).max() < 1e-8 * np.abs(u).max() / g.dx
    assert np.abs(div[labels == FLUID]).max() <= 1e-5 * np.abs(u).max() / g.dx
    vel[3, 3:8, 0] = 1.0  # left wall pushes in, nothing leaves
    fixed, fv = constrained_corners(labels, vel)
    with pytest.raises(CompatibilityError):
        pressure_solve(u, labels, fixed, fv, 1.0, g.dx, 0.01)
    pressure_solve(u, labels, fixed, fv, 1.0, g.dx, 0.01, pocket_policy="project")


def test_plume_leaves_through_the_top():
    st_ = FluidState.at_rest([0, 0], 0.1, (12, 12))
    T = np.full((12, 12), 298.0)
    T[5:7, 1:3] = 900.0
    params = FluidParams(alpha=1.0)
    for _ in range(20):
        st_, _, _ = fluid_step(st_, SmokeParticles.empty(2), None, T, 298.0, params, 0.02)
    top = st_.u[:, -1, 1]
    assert top.max() > 1e-3
    assert np.abs(st_.u[:, 0, :]).max() == 0.0  # closed floor


def test_flip_p2g():
    k = GridDescriptor.for_corners([0, 0], 0.1, (8, 8))
    u, m = flip_p2g(SmokeParticles.empty(2), k)
    assert not np.any(m > 0)
    u, m = flip_p2g(smoke_at([[0.3, 0.4]], v=[[1.5, -2.0]]), k)
    np.testing.assert_allclose(u[3, 4], [1.5, -2.0])
    rng = np.random.default_rng(1)
    s = smoke_at(rng.uniform(0.05, 0.75, (50, 2)), v=rng.normal(size=(50, 2)), m=0.7)
    u, m = flip_p2g(s, k)
    np.testing.assert_allclose((m[..., None] * u).sum((0, 1)), (s.m[:, None] * s.v).sum(0), rtol=1e-12)


def test_backtrace_simple_fields():
    k = GridDescriptor.for_corners([0, 0], 0.1, (10, 10))
    x = np.array([[0.5, 0.5], [0.31, 0.77]])
    np.testing.assert_array_equal(backtrace_rk3(x, np.zeros((11, 11, 2)), k, 0.1), x)
    u0 = np.zeros((11, 11, 2)) + [0.3, -0.2]
    np.testing.assert_allclose(backtrace_rk3(x, u0, k, 0.1), x - 0.1 * np.array([0.3, -0.2]), atol=1e-15)


def test_backtrace_third_order():
    from scipy.linalg import expm
    k = GridDescriptor.for_corners([-2, -2], 0.25, (16, 16))
    A = np.array([[0.3, -1.0], [0.8, -0.2]])
    nodes = k.all_node_positions().reshape(17, 17, 2)
    u = nodes @ A.T
    x = np.array([[0.2, 0.1]])
    errs = []
    for dt in (0.2, 0.1, 0.05):
        exact = expm(-A * dt) @ x[0]
        errs.append(np.abs(backtrace_rk3(x, u, k, dt)[0] - exact).max())
    ratio = errs[0] / errs[1], errs[1] / errs[2]
    assert all(r > 12 for r in ratio)  # fourth-order local error: ratio ~ 16


def test_cubic_linear_exact_and_better_than_linear():
    g = GridDescriptor.for_cells([0, 0], 0.1, (12, 12))
    nodes = g.all_node_positions().reshape(12, 12, 2)
    f = 0.3 + nodes @ np.array([1.2, -0.7])
    rng = np.random.default_rng(0)
    x = rng.uniform(0.05, 1.15, (200, 2))
    np.testing.assert_allclose(interpolate_monotonic_cubic(f, g, x), 0.3 + x @ [1.2, -0.7], atol=1e-12)
    h = np.sin(2 * nodes[..., 0]) * np.cos(1.5 * nodes[..., 1])
    x = rng.uniform(0.3, 0.9, (300, 2))
    exact = np.sin(2 * x[:, 0]) * np.cos(1.5 * x[:, 1])
    cubic = np.abs(interpolate_monotonic_cubic(h, g, x) - exact).max()
    linear = np.abs(interpolate_linear(h, g, x) - exact).max()
    assert cubic < linear


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_cubic_never_overshoots(seed, step):
    rng = np.random.default_rng(seed)
    g = GridDescriptor.for_cells([0, 0, 0], 1.0, (6, 6, 6))
    if step:
        f = np.where(rng.random((6, 6, 6)) < 0.5, 0.0, 1.0)
    else:
        f = rng.normal(size=(6, 6, 6))
    x = rng.uniform(0.5, 5.5, (100, 3))
    val = interpolate_monotonic_cubic(f, g, x)
    s = x - 0.5
    k = np.clip(np.floor(s).astype(int), 0, 4)
    for i in range(100):
        lo = f[tuple(slice(max(kk - 1, 0), kk + 3) for kk in k[i])]
        assert lo.min() - 1e-12 <= val[i] <= lo.max() + 1e-12


def test_advect_velocity_rules():
    k = GridDescriptor.for_corners([0, 0], 0.1, (10, 10))
    u0 = np.zeros((11, 11, 2)) + [0.4, 0.1]
    np.testing.assert_allclose(advect_velocity(u0, k, 0.05), u0, atol=1e-14)
    rng = np.random.default_rng(3)
    u = rng.normal(size=(11, 11, 2)) * 0.2
    pure = advect_velocity(u, k, 0.05)
    s = smoke_at([[0.52, 0.47]], v=[[5.0, 5.0]])
    uf, mf = flip_p2g(s, k)
    mixed = advect_velocity(u, k, 0.05, uf, mf)
    band = mf > 0
    assert band.sum() == 4
    np.testing.assert_array_equal(mixed[band], uf[band])
    np.testing.assert_array_equal(mixed[~band], pure[~band])


def test_buoyancy_values():
    u = np.zeros((5, 5, 2))
    T = np.full((4, 4), 298.0)
    np.testing.assert_array_equal(apply_buoyancy(u, T, 0.01, 298.0, 0.1), u)
    out = apply_buoyancy(u, np.full((4, 4), 600.0), 0.01, 298.0, 0.5)
    np.testing.assert_allclose(out[..., 1], 0.5 * 3.02)
    np.testing.assert_array_equal(out[..., 0], 0.0)


def test_smoke_advection_blends_and_deletes():
    k = GridDescriptor.for_corners([0, 0], 0.1, (10, 10))
    c = GridDescriptor.for_cells([0, 0], 0.1, (10, 10))
    rng = np.random.default_rng(2)
    s = smoke_at(rng.uniform(0.2, 0.8, (30, 2)), v=rng.normal(size=(30, 2)))
    u = rng.normal(size=(11, 11, 2))
    same = advect_smoke_particles(s, u, u, k, c, 1.0, 0.01)
    np.testing.assert_allclose(same.v, s.v, atol=1e-15)
    np.testing.assert_allclose(same.x, s.x + 0.01 * s.v)
    u2 = rng.normal(size=(11, 11, 2))
    pic = advect_smoke_particles(s, u, u2, k, c, 0.0, 0.01)
    np.testing.assert_allclose(pic.v, interpolate_linear(u2, k, s.x), atol=1e-15)
    fast = smoke_at([[0.5, 0.5], [0.5, 0.94]], v=[[0.0, 0.0], [0.0, 10.0]])
    out = advect_smoke_particles(fast, u * 0, u * 0, k, c, 0.99, 0.01)
    assert len(out) == 1
    assert FluidParams().alpha_flip == 0.99
