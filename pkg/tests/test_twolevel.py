import numpy as np
import pytest

from lpbfsim.fem import (
    BoundarySpec,
    FieldState,
    SolverSettings,
    solve_monolithic,
    uniform_field,
)
from lpbfsim.materials import MaterialModel
from lpbfsim.mesh import BOTTOM, TOP, Box, build_structured_mesh, extract_interface
from lpbfsim.sources import LaserBeam, ThermalBC, gaussian_source_2d
from lpbfsim.twolevel import (
    CouplingError,
    CouplingSettings,
    TwoLevelProblem,
    consistency_diagnostic,
    initial_state,
    solve_local,
    transmission_load,
    two_level_iterate,
)


def material(k_lo=10.0, k_hi=25.0, chi=0.0):
    return MaterialModel(
        np.array([[300.0, k_lo], [1300.0, k_hi]]),
        np.array([[300.0, 400.0], [1300.0, 700.0]]),
        8000.0, chi, 1563.15, 1653.15, 0.05,
    )


BC0 = ThermalBC(h_conv=0.0, emissivity=0.0, T_ambient=300.0, T_buildplate=300.0)


def meshes(h=0.125):
    gm = build_structured_mesh(Box((0, 0), (5, 1)), h)
    lm = build_structured_mesh(Box((1, 0.625), (2, 1)), h)
    return gm, lm


def test_transmission_zero_for_equal_conductivity():
    gm, lm = meshes()
    gamma = extract_interface(lm, gm)
    field = FieldState(lm, 300.0 + 40.0 * lm.coords[:, 0] * lm.coords[:, 1], 0.0)
    load = transmission_load(field, gamma, gm, material(), material())
    assert np.all(load == 0.0)


def test_transmission_zero_for_constant_local_field():
    gm, lm = meshes()
    gamma = extract_interface(lm, gm)
    field = uniform_field(lm, 500.0)
    load = transmission_load(field, gamma, gm, material(), material(5.0, 12.0))
    assert np.allclose(load, 0.0, atol=1e-18)


def test_transmission_hand_computed_linear_field():
    # T_local = x, kappa jump delta: testing against w=1 and w=x.
    # against 1: delta * (|right| - |left|) = 0 on this symmetric box
    # against x: delta * (b - a) * (H - c) for a local box [a,b] x [c,H]
    gm, lm = meshes()
    gamma = extract_interface(lm, gm)
    delta = 7.0
    mat_g = material(10.0 + delta, 10.0 + delta)
    mat_l = material(10.0, 10.0)
    field = FieldState(lm, lm.coords[:, 0].copy(), 0.0)
    load = transmission_load(field, gamma, gm, mat_g, mat_l)
    assert load.sum() == pytest.approx(0.0, abs=1e-12)
    wx = gm.coords[:, 0]
    expect = delta * (2.0 - 1.0) * (1.0 - 0.625)
    assert load @ wx == pytest.approx(expect, rel=1e-12)


def test_transmission_linear_in_local_field():
    gm, lm = meshes()
    gamma = extract_interface(lm, gm)
    mat_g = material(12.0, 12.0)
    mat_l = material(9.0, 9.0)
    f1 = FieldState(lm, lm.coords[:, 0].copy(), 0.0)
    f2 = FieldState(lm, lm.coords[:, 1].copy(), 0.0)
    both = FieldState(lm, 2.0 * lm.coords[:, 0] + 3.0 * lm.coords[:, 1], 0.0)
    l1 = transmission_load(f1, gamma, gm, mat_g, mat_l)
    l2 = transmission_load(f2, gamma, gm, mat_g, mat_l)
    lb = transmission_load(both, gamma, gm, mat_g, mat_l)
    assert np.allclose(lb, 2.0 * l1 + 3.0 * l2, atol=1e-12)


def simple_problem(mat_g, mat_l, bc=BC0, mode="alternate", source=None, omega=1.0):
    gm, lm = meshes()
    problem = TwoLevelProblem(
        global_mesh=gm,
        mat_global=mat_g,
        mat_local=mat_l,
        bc=bc,
        coupling=CouplingSettings(omega=omega),
        mode=mode,
        global_source=(lambda t0, t1, predictor=False: source) if source else None,
        local_source=(lambda t: source) if source else None,
    )
    return problem, lm


def test_local_constant_trace_no_source():
    problem, lm = simple_problem(material(), material())
    state = initial_state(problem, lm, uniform_field(problem.global_mesh, 300.0))
    trace = np.full(state.gamma.trace_nodes.size, 300.0)
    out = solve_local(problem, state.local_field, 0.1, state.gamma, trace)
    assert np.allclose(out.values, 300.0, atol=1e-10)


def test_local_reproduces_linear_global_trace():
    mat = material(15.0, 15.0)
    problem, lm = simple_problem(mat, mat)
    gm = problem.global_mesh
    lin = FieldState(gm, 300.0 + 12.0 * gm.coords[:, 0] + 5.0 * gm.coords[:, 1], 0.0)
    state = initial_state(problem, lm, lin)
    trace = state.gamma.trace_of(lin.values, gm)
    out = solve_local(problem, state.local_field, 0.1, state.gamma, trace)
    expect = 300.0 + 12.0 * lm.coords[:, 0] + 5.0 * lm.coords[:, 1]
    assert np.allclose(out.values, expect, atol=1e-8)
    assert np.allclose(out.values[state.gamma.trace_nodes], trace)


def test_decoupled_case_converges_immediately():
    mat = material()
    problem, lm = simple_problem(mat, mat)
    assert problem.one_way
    state = initial_state(problem, lm, uniform_field(problem.global_mesh, 300.0))
    new_state, iters = two_level_iterate(problem, state, 0.1)
    assert iters <= 2
    assert np.allclose(new_state.global_field.values, 300.0, atol=1e-10)
    assert np.allclose(new_state.local_field.values, 300.0, atol=1e-10)


def test_equilibrium_preserved_with_zero_source():
    mat = material()
    bc = ThermalBC(h_conv=20.0, emissivity=0.4, T_ambient=300.0, T_buildplate=300.0)
    problem, lm = simple_problem(mat, mat, bc=bc)
    state = initial_state(problem, lm, uniform_field(problem.global_mesh, 300.0))
    state, _ = two_level_iterate(problem, state, 0.5)
    assert np.allclose(state.global_field.values, 300.0, atol=1e-9)
    assert np.allclose(state.local_field.values, 300.0, atol=1e-9)


def heated_bc():
    return ThermalBC(h_conv=10.0, emissivity=0.0, T_ambient=300.0, T_buildplate=300.0)


def melt_material(k_lo, k_hi, chi=0.0):
    # unit-box scaling: rho*c = 1000 so a kW-class beam drives hundreds of
    # kelvin per second and the transition band at 400..500 K is reachable
    return MaterialModel(
        np.array([[300.0, k_lo], [1300.0, k_hi]]),
        np.array([[300.0, 10.0], [1300.0, 10.0]]),
        100.0, chi, 400.0, 500.0, 0.05,
    )


def heated_source(power=3000.0):
    beam = LaserBeam(power=power, absorptivity=1.0, radius=0.25, depth=0.1, speed=0.0)

    def src(pts):
        return gaussian_source_2d(beam, (1.5, 1.0), pts)

    return src


def test_two_way_coupling_converges_and_is_omega_independent():
    mat_g = melt_material(2.0, 3.0)
    mat_l = melt_material(5.0, 8.0)
    src = heated_source()
    p1, lm = simple_problem(mat_g, mat_l, bc=heated_bc(), source=src, omega=1.0)
    p2, _ = simple_problem(mat_g, mat_l, bc=heated_bc(), source=src, omega=0.5)
    assert not p1.one_way
    s1 = initial_state(p1, lm, uniform_field(p1.global_mesh, 300.0))
    s2 = initial_state(p2, lm, uniform_field(p2.global_mesh, 300.0))
    out1, it1 = two_level_iterate(p1, s1, 0.05)
    out2, it2 = two_level_iterate(p2, s2, 0.05)
    assert it1 >= 2 and it2 >= it1
    scale = np.linalg.norm(out1.local_field.values)
    diff = np.linalg.norm(out1.local_field.values - out2.local_field.values) / scale
    assert diff < 10 * p1.coupling.tolerance


def test_iterate_idempotent_at_fixed_point():
    mat_g = melt_material(2.0, 3.0)
    mat_l = melt_material(5.0, 8.0)
    src = heated_source()
    problem, lm = simple_problem(mat_g, mat_l, bc=heated_bc(), source=src)
    state = initial_state(problem, lm, uniform_field(problem.global_mesh, 300.0))
    state, _ = two_level_iterate(problem, state, 0.05)
    again, iters = two_level_iterate(problem, state, 1e-12)
    scale = max(np.linalg.norm(state.trace), 1e-12)
    assert np.linalg.norm(again.trace - state.trace) / scale < problem.coupling.tolerance


def test_coupled_matches_monolithic_identical_discretization():
    # equal materials, matching meshes and steps: the coupled pair must
    # reproduce the single-mesh solve up to solver tolerances
    mat = material()
    src = heated_source()
    bc = heated_bc()
    problem, lm = simple_problem(mat, mat, bc=bc, source=src)
    gm = problem.global_mesh
    T0 = uniform_field(gm, 300.0)
    state = initial_state(problem, lm, T0)
    dt, n = 0.05, 4
    for _ in range(n):
        state, _ = two_level_iterate(problem, state, dt)

    def bounds_at(t):
        return BoundarySpec(bc=bc, robin_tags=(TOP,), radiation=False,
                            dirichlet_nodes=gm.nodes_on(BOTTOM),
                            dirichlet_values=bc.T_buildplate)

    ref = solve_monolithic(gm, mat, lambda t: src, bounds_at, dt, n, T0, latent=False)
    ref_local = gm.interpolate(ref.values[-1], lm.coords)
    rel = np.linalg.norm(state.local_field.values - ref_local) / np.linalg.norm(ref_local)
    assert rel < 1e-6
    rel_g = np.linalg.norm(state.global_field.values - ref.values[-1]) / np.linalg.norm(ref.values[-1])
    assert rel_g < 1e-8


def test_full_and_alternate_modes_differ_only_on_overlap():
    # latent heat active in the fine problem: the full form feeds it back
    mat = melt_material(5.0, 8.0, chi=2.0e4)
    src = heated_source(power=6000.0)
    bc = heated_bc()
    p_alt, lm = simple_problem(mat, mat, bc=bc, source=src, mode="alternate")
    p_full, _ = simple_problem(mat, mat, bc=bc, source=src, mode="full")
    assert p_alt.one_way and not p_full.one_way
    s_alt = initial_state(p_alt, lm, uniform_field(p_alt.global_mesh, 300.0))
    s_full = initial_state(p_full, lm, uniform_field(p_full.global_mesh, 300.0))
    dt = 0.2
    for _ in range(5):
        s_alt, _ = two_level_iterate(p_alt, s_alt, dt)
        s_full, _ = two_level_iterate(p_full, s_full, dt)
    # melting must actually occur for the latent term to matter
    assert s_alt.local_field.values.max() > mat.T_solidus
    diff = np.abs(s_full.global_field.values - s_alt.global_field.values)
    assert diff.max() > 1e-6
    gm = p_alt.global_mesh
    inside = lm.box.contains(gm.coords, tol=1e-12)
    assert diff[inside].max() > 10 * diff[~inside].max()


def test_consistency_diagnostic_zero_for_identical_fields():
    mat = material()
    problem, lm = simple_problem(mat, mat)
    gm = problem.global_mesh
    state = initial_state(problem, lm, uniform_field(gm, 321.0))
    ref = uniform_field(gm, 321.0)
    out = consistency_diagnostic(state, ref, gm)
    assert out["local"] == pytest.approx(0.0, abs=1e-12)
    assert out["overlap"] == pytest.approx(0.0, abs=1e-12)
    assert out["exterior"] == pytest.approx(0.0, abs=1e-12)
    assert all(v >= 0 for v in out.values())


def test_time_stamp_mismatch_rejected():
    mat = material()
    problem, lm = simple_problem(mat, mat)
    state = initial_state(problem, lm, uniform_field(problem.global_mesh, 300.0))
    with pytest.raises(CouplingError):
        two_level_iterate(problem, state, 0.1, local_from=state.local_field, local_dt=0.05)
