import dataclasses

import numpy as np
import pytest

from chbiot.assembly import assemble_coupling, assemble_elasticity, assemble_scalar_mass, assemble_weighted_stiffness
from chbiot.cli_io import build_initial_data
from chbiot.diagnostics import tumor_mass
from chbiot.fem import space_for
from chbiot.grid import build_dofmap, build_mesh
from chbiot.material import MaterialTable
from chbiot.stepper import RunAborted, State, Stepper, StepFailure, TimeStepConfig, advance, run

from conftest import random_state

MAT = MaterialTable()


def dense_flow_oracle(mesh, old, phi, dt, material=MAT):
    """Dense block system for (u, theta, p), clamped u, solved with LAPACK."""
    N = mesh.num_nodes
    sp = space_for(mesh)
    el = assemble_elasticity(mesh, phi, dt, material, u_old=old.u)
    cp = assemble_coupling(mesh, phi, material)
    Ms = assemble_scalar_mass(mesh).to_dense()
    K = assemble_weighted_stiffness(mesh, material.kappa(sp.values(phi))).to_dense()
    A = np.zeros((4 * N, 4 * N))
    A[: 2 * N, : 2 * N] = el.matrix.to_dense()
    A[: 2 * N, 3 * N :] = -cp.B.to_dense()
    A[2 * N : 3 * N, 2 * N : 3 * N] = Ms / dt
    A[2 * N : 3 * N, 3 * N :] = K
    A[3 * N :, : 2 * N] = cp.C.to_dense()
    A[3 * N :, 2 * N : 3 * N] = -cp.D.to_dense()
    A[3 * N :, 3 * N :] = Ms
    b = np.concatenate([el.load, Ms @ old.theta / dt, np.zeros(N)])
    fixed = np.flatnonzero(build_dofmap(mesh).dirichlet_mask)
    free = np.setdiff1d(np.arange(4 * N), fixed)
    x = np.zeros(4 * N)
    x[free] = np.linalg.solve(A[np.ix_(free, free)], b[free])
    return x[: 2 * N], x[2 * N : 3 * N], x[3 * N :]


@pytest.mark.parametrize("n", [2, 4])
def test_flow_solve_matches_dense_oracle(n, rng):
    mesh = build_mesh(n)
    cfg = TimeStepConfig(dt=0.05, model="chb")
    old = random_state(mesh, rng)
    phi = rng.uniform(0, 1, mesh.num_nodes)
    got = Stepper(mesh, cfg).step_flow_mechanics(old, phi)
    for a, b in zip(got, dense_flow_oracle(mesh, old, phi, cfg.dt)):
        np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-8 * np.abs(b).max())


def test_flow_solve_jacobi_option_matches_lu(rng):
    mesh = build_mesh(4)
    old = random_state(mesh, rng)
    phi = rng.uniform(0, 1, mesh.num_nodes)
    # plain diagonal scaling only copes while the mass term dominates the Darcy term (small dt)
    a = Stepper(mesh, TimeStepConfig(dt=0.01)).step_flow_mechanics(old, phi)
    b = Stepper(mesh, TimeStepConfig(dt=0.01, linear_solver="jacobi-bicgstab")).step_flow_mechanics(old, phi)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-7, atol=1e-9)


def test_flow_rest_state_is_zero():
    mesh = build_mesh(4)
    st = Stepper(mesh, TimeStepConfig(dt=0.1))
    u, theta, p = st.step_flow_mechanics(State.zeros(mesh), np.zeros(mesh.num_nodes))
    assert not u.any() and not theta.any() and not p.any()


def test_flow_conserves_fluid_content(rng):
    mesh = build_mesh(6)
    st = Stepper(mesh, TimeStepConfig(dt=0.1))
    old = random_state(mesh, rng)
    _, theta, _ = st.step_flow_mechanics(old, rng.uniform(0, 1, mesh.num_nodes))
    assert tumor_mass(mesh, theta) == pytest.approx(tumor_mass(mesh, old.theta), abs=1e-12)


def test_cl_flow_keeps_fluid_fields_and_ch_rejects(rng):
    mesh = build_mesh(4)
    old = random_state(mesh, rng)
    phi = rng.uniform(0, 1, mesh.num_nodes)
    u, theta, p = Stepper(mesh, TimeStepConfig(dt=0.1, model="cl")).step_flow_mechanics(old, phi)
    np.testing.assert_array_equal(theta, old.theta)
    np.testing.assert_array_equal(p, old.p)
    A, b = Stepper(mesh, TimeStepConfig(dt=0.1, model="cl")).elasticity_system(old, phi, 0.1)
    free = build_dofmap(mesh).free_vector_dofs
    ref = np.linalg.solve(A.to_dense()[np.ix_(free, free)], b[free])
    np.testing.assert_allclose(u[free], ref, rtol=1e-9, atol=1e-12)
    with pytest.raises(ValueError):
        Stepper(mesh, TimeStepConfig(model="ch")).step_flow_mechanics(old, phi)


@pytest.mark.parametrize("model", ["ch", "cl", "chb"])
def test_ch_jacobian_matches_finite_differences(model, rng):
    mesh = build_mesh(2)
    st = Stepper(mesh, TimeStepConfig(dt=0.05, model=model))
    old = random_state(mesh, rng)
    uip = (rng.normal(0, 0.05, 2 * mesh.num_nodes), rng.uniform(0, 1, mesh.num_nodes), None)
    phi = rng.uniform(0.1, 0.9, mesh.num_nodes)
    mu = rng.normal(size=mesh.num_nodes)
    _, J = st.ch_residual_and_jacobian(old, phi, mu, uip, 0.05)
    J = J.to_dense()
    N = mesh.num_nodes
    x = np.concatenate([phi, mu])
    h = 1e-6
    fd = np.zeros_like(J)
    for k in range(2 * N):
        e = np.zeros(2 * N)
        e[k] = h
        rp, _ = st.ch_residual_and_jacobian(old, (x + e)[:N], (x + e)[N:], uip, 0.05, want_jacobian=False)
        rm, _ = st.ch_residual_and_jacobian(old, (x - e)[:N], (x - e)[N:], uip, 0.05, want_jacobian=False)
        fd[:, k] = (rp - rm) / (2 * h)
    assert np.abs(J - fd).max() <= 1e-6 * max(1.0, np.abs(J).max())


def test_newton_reaches_tolerance_and_contracts(rng):
    mesh = build_mesh(4)
    cfg = TimeStepConfig(dt=0.05, model="chb")
    st = Stepper(mesh, cfg)
    old = random_state(mesh, rng)
    uip = (old.u, old.theta, old.p)
    phi, mu, stats = st.step_cahn_hilliard_newton(old, uip)
    R, _ = st.ch_residual_and_jacobian(old, phi, mu, uip, cfg.dt, want_jacobian=False)
    assert np.linalg.norm(R) <= cfg.newton_tol
    r = stats.residuals
    assert len(r) >= 2
    ratios = [b / a for a, b in zip(r[:-1], r[1:]) if a > 0]
    assert ratios[-1] < 0.5


def test_pure_phase_is_equilibrium():
    mesh = build_mesh(4)
    st = Stepper(mesh, TimeStepConfig(dt=0.1, model="ch"))
    old = State.zeros(mesh)
    phi, mu, stats = st.step_cahn_hilliard_newton(old, (old.u, old.theta, old.p))
    assert not phi.any() and not mu.any() and stats.iterations == 0


def test_uniform_phase_gains_source_mass():
    mesh = build_mesh(4)
    dt = 1e-3
    st = Stepper(mesh, TimeStepConfig(dt=dt, model="ch"))
    old = State.zeros(mesh)
    old.phi = np.full(mesh.num_nodes, 0.5)
    phi, _, _ = st.step_cahn_hilliard_newton(old, (old.u, old.theta, old.p))
    assert tumor_mass(mesh, phi) - 0.5 == pytest.approx(1.25 * dt, rel=1e-6)


def test_advance_examples():
    mesh = build_mesh(8)
    init = build_initial_data(mesh)
    _, rep = advance(mesh, init, TimeStepConfig(dt=2**-6, model="ch"))
    assert rep.outer_iterations == 1
    _, rep = advance(mesh, State.zeros(mesh), TimeStepConfig(dt=2**-6, model="chb"))
    assert rep.outer_iterations == 1 and rep.final_relative_change == 0.0
    new, rep = advance(mesh, init, TimeStepConfig(dt=2**-6, model="chb"))
    assert rep.converged and rep.outer_iterations <= 50
    c = rep.changes
    assert c[0] > c[1] > c[2]
    assert not new.u[build_dofmap(mesh).dirichlet_mask].any()


def test_pressure_closure_residual_after_step():
    mesh = build_mesh(8)
    cfg = TimeStepConfig(dt=2**-6, model="chb")
    new, _ = advance(mesh, build_initial_data(mesh), cfg)
    cp = assemble_coupling(mesh, new.phi, cfg.material)
    Ms = assemble_scalar_mass(mesh)
    res = Ms.matvec(new.p) - cp.D.matvec(new.theta) + cp.C.matvec(new.u)
    assert np.linalg.norm(res) <= 10 * cfg.linear.rtol * max(1.0, np.linalg.norm(cp.D.matvec(new.theta)))


def test_run_zero_steps_and_composition():
    mesh = build_mesh(4)
    init = build_initial_data(mesh)
    out = run(mesh, init, TimeStepConfig(dt=0.1, t_final=0.0))
    np.testing.assert_array_equal(out.phi, init.phi)
    cfg = TimeStepConfig(dt=0.1, t_final=0.1)
    one = run(mesh, init, cfg)
    ref, _ = advance(mesh, init, cfg)
    np.testing.assert_array_equal(one.phi, ref.phi)
    np.testing.assert_array_equal(one.u, ref.u)


def test_run_hooks_and_shortened_last_step():
    mesh = build_mesh(4)
    seen = []
    cfg = TimeStepConfig(dt=0.1, t_final=0.25, model="ch")
    assert cfg.step_sizes() == pytest.approx([0.1, 0.1, 0.05])
    final = run(mesh, build_initial_data(mesh), cfg, [lambda k, s, r: seen.append((k, s.time, r is None))])
    assert seen == [(0, 0.0, True), (1, 0.1, False), (2, 0.2, False), (3, 0.25, False)]
    assert final.time == 0.25


def test_run_aborts_after_retry():
    mesh = build_mesh(4)
    cfg = TimeStepConfig(dt=0.1, t_final=0.1, newton_max_iters=1, newton_tol=1e-30)
    with pytest.raises(RunAborted) as exc:
        run(mesh, build_initial_data(mesh), cfg)
    assert exc.value.step_index == 1
    assert isinstance(exc.value.cause, StepFailure)


@pytest.mark.parametrize(
    "kwargs",
    [dict(dt=0.0), dict(t_final=-1.0), dict(model="xyz"), dict(decoupling_tol=0.0), dict(newton_max_iters=0), dict(linear_solver="gmres")],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TimeStepConfig(**kwargs)


def test_constant_coefficient_mode_swaps_material():
    cfg = TimeStepConfig(constant_coefficients=True)
    assert cfg.effective_material.is_constant_coefficient
    assert not TimeStepConfig().effective_material.is_constant_coefficient


@pytest.mark.parametrize("model", ["ch", "cl", "chb"])
def test_mass_conservation_without_growth(model):
    mesh = build_mesh(8)
    mat = dataclasses.replace(MAT, proliferation=0.0)
    cfg = TimeStepConfig(dt=2**-6, t_final=4 * 2**-6, model=model, material=mat)
    init = build_initial_data(mesh)
    m0 = tumor_mass(mesh, init.phi)
    t0 = tumor_mass(mesh, init.theta)
    masses = []
    run(mesh, init, cfg, [lambda k, s, r: masses.append((tumor_mass(mesh, s.phi), tumor_mass(mesh, s.theta)))])
    for m, t in masses:
        assert abs(m - m0) <= 1e-10 and abs(t - t0) <= 1e-10
