import math

import numpy as np
import pytest

from chbiot.cli_io import build_initial_data
from chbiot.diagnostics import (
    ContourSet,
    Norms,
    SeriesRecorder,
    TimeSeriesRow,
    contours_nested,
    continuous_dependence_experiment,
    darcy_velocity,
    energy_inequality_monitor,
    marching_squares,
    boundary_arcs,
    points_inside,
    tumor_mass,
)
from chbiot.grid import build_mesh
from chbiot.material import MaterialTable
from chbiot.stepper import State, TimeStepConfig, run

MAT = MaterialTable()


def test_tumor_mass_examples():
    mesh = build_mesh(5)
    N = mesh.num_nodes
    assert tumor_mass(mesh, np.ones(N)) == pytest.approx(1.0, abs=1e-14)
    assert tumor_mass(mesh, np.full(N, 0.5)) == pytest.approx(0.5, abs=1e-14)
    assert tumor_mass(mesh, mesh.node_coords[:, 0].copy()) == pytest.approx(0.5, abs=1e-14)


def test_norms_on_known_fields():
    mesh = build_mesh(8)
    nm = Norms(mesh)
    x = mesh.node_coords[:, 0].copy()
    assert nm.l2_sq(x) == pytest.approx(1 / 3, rel=1e-12)
    assert nm.grad_sq(x) == pytest.approx(1.0, rel=1e-12)
    u = np.column_stack([x, 2 * x]).ravel()
    assert nm.vector_grad_sq(u) == pytest.approx(5.0, rel=1e-12)
    assert nm.dual_sq(np.full(mesh.num_nodes, 0.3)) == pytest.approx(0.09, rel=1e-12)


def test_dual_norm_of_cosine_mode():
    # -Lap w = cos(pi x) has w = cos(pi x)/pi^2, ||grad w||^2 = 1/(2 pi^2)
    mesh = build_mesh(64)
    f = np.cos(np.pi * mesh.node_coords[:, 0])
    assert Norms(mesh).dual_sq(f) == pytest.approx(1 / (2 * np.pi**2), rel=1e-3)


def test_marching_squares_vertical_line():
    mesh = build_mesh(10)
    cs = marching_squares(mesh, mesh.node_coords[:, 0], 0.5)
    assert len(cs.polylines) == 1
    assert cs.total_length() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(cs.polylines[0][:, 0], 0.5)
    assert cs.closed() == []


def test_marching_squares_empty_and_invalid():
    mesh = build_mesh(4)
    assert marching_squares(mesh, np.zeros(25), 0.5).polylines == []
    with pytest.raises(ValueError):
        marching_squares(mesh, np.zeros(25), math.nan)


def test_marching_squares_circle_perimeter():
    mesh = build_mesh(64)
    r = np.hypot(*(mesh.node_coords - 0.5).T)
    cs = marching_squares(mesh, r, 0.25)
    assert len(cs.closed()) == 1
    assert cs.total_length() == pytest.approx(2 * np.pi * 0.25, rel=0.02)
    pts = np.vstack(cs.polylines)
    assert pts.min() >= 0 and pts.max() <= 1
    steps = np.linalg.norm(np.diff(cs.polylines[0], axis=0), axis=1)
    assert steps.max() <= np.sqrt(2) * mesh.h + 1e-12


def test_saddle_resolved_by_cell_average():
    mesh = build_mesh(1)
    # nodes (0,0), (1,0), (0,1), (1,1): high corners bottom-left and top-right, cell average 0.5
    field = np.array([1.0, 0.0, 0.0, 1.0])

    def midpoints(level):
        cs = marching_squares(mesh, field, level)
        return sorted(tuple(np.round(p.mean(axis=0), 12)) for p in cs.polylines)

    # average above the level: the high corners connect, segments cut off the low corners
    assert midpoints(0.4) == [(0.2, 0.8), (0.8, 0.2)]
    # average below the level: the high corners are isolated
    assert midpoints(0.6) == [(0.2, 0.2), (0.8, 0.8)]


def test_points_inside_square():
    square = ContourSet(0.5, [np.array([[0.2, 0.2], [0.8, 0.2], [0.8, 0.8], [0.2, 0.8], [0.2, 0.2]])])
    inside = points_inside(square, [[0.5, 0.5], [0.9, 0.5], [0.1, 0.1]])
    assert inside.tolist() == [True, False, False]


def test_region_touching_boundary_is_closed_along_the_boundary():
    mesh = build_mesh(8)
    x = mesh.node_coords[:, 0]
    lines = marching_squares(mesh, x, 0.55)
    arcs = boundary_arcs(mesh, x, 0.55)
    assert all(not np.allclose(pl[0], pl[-1]) for pl in lines.polylines)
    centres = mesh.node_coords[mesh.elements].mean(axis=1)
    inside = points_inside(lines, centres, arcs)
    np.testing.assert_array_equal(inside, centres[:, 0] > 0.55)


def test_boundary_arcs_whole_boundary_and_empty():
    mesh = build_mesh(4)
    ones = np.ones(mesh.num_nodes)
    (loop,) = boundary_arcs(mesh, ones, 0.5)
    np.testing.assert_allclose(loop[0], loop[-1])
    assert len(loop) == 4 * 4 + 1
    assert boundary_arcs(mesh, ones, 2.0) == []


def test_nesting_for_region_cut_by_the_boundary():
    mesh = build_mesh(32)
    x, y = mesh.node_coords.T
    phi = np.exp(-((x - 0.05) ** 2 + (y - 0.5) ** 2) / 0.05)
    assert contours_nested(mesh, phi, 0.9, 0.5)
    # swapping the levels must break nesting
    assert not contours_nested(mesh, phi, 0.5, 0.9)


def test_initial_contours_nested():
    mesh = build_mesh(64)
    assert contours_nested(mesh, build_initial_data(mesh).phi)


@pytest.mark.parametrize("phase, expected", [(0.0, -0.5), (1.0, -5.0)])
def test_darcy_velocity_examples(phase, expected):
    mesh = build_mesh(4)
    N = mesh.num_nodes
    q = darcy_velocity(mesh, np.full(N, phase), mesh.node_coords[:, 0].copy(), MAT)
    np.testing.assert_allclose(q, np.tile([expected, 0.0], (16, 1)), atol=1e-13)
    np.testing.assert_allclose(darcy_velocity(mesh, np.full(N, phase), np.full(N, 3.0), MAT), 0.0, atol=1e-13)


def _row(lhs, energy=0.0):
    return TimeSeriesRow(0.0, 0.0, energy, 0.0, 0.0, energy, 0.0, 0.0, 0, energy_bound_lhs=lhs)


def test_monitor_plumbing():
    rep = energy_inequality_monitor([_row(1.0), _row(2.0)], 1.0)
    assert rep.passed and rep.ratio == 2.0 and rep.max_lhs == 2.0
    assert not energy_inequality_monitor([_row(1.0), _row(math.nan)], 1.0).passed
    assert not energy_inequality_monitor([_row(3.0)], 1.0, bound=2.0).passed
    assert not energy_inequality_monitor([], 1.0).passed


def test_monitor_zero_data():
    mesh = build_mesh(4)
    rec = SeriesRecorder(mesh, MAT, "chb")
    mat = MaterialTable(proliferation=0.0)
    run(mesh, State.zeros(mesh), TimeStepConfig(dt=0.1, t_final=0.3, material=mat), [rec])
    rep = energy_inequality_monitor(rec.all_rows, rec.data_functional)
    assert rep.passed and rep.max_lhs == 0.0 and rec.data_functional == 1.0


def test_recorder_rows_and_cadence():
    mesh = build_mesh(8)
    rec = SeriesRecorder(mesh, MAT, "chb", every=2)
    run(mesh, build_initial_data(mesh), TimeStepConfig(dt=2**-6, t_final=5 * 2**-6), [rec])
    assert [r.time for r in rec.rows] == pytest.approx([0.0, 2 * 2**-6, 4 * 2**-6])
    assert len(rec.all_rows) == 6
    for r in rec.all_rows:
        assert r.E_total == pytest.approx(r.E_phi + r.E_u + r.E_theta, rel=1e-14)
    assert rec.all_rows[0].outer_iterations == 0 and rec.all_rows[1].outer_iterations > 1


def test_continuous_dependence_requires_constant_coefficients():
    mesh = build_mesh(4)
    with pytest.raises(ValueError):
        continuous_dependence_experiment(mesh, build_initial_data(mesh), TimeStepConfig(), np.zeros(25))


def test_continuous_dependence_zero_scale():
    mesh = build_mesh(8)
    cfg = TimeStepConfig(dt=2**-6, t_final=4 * 2**-6, constant_coefficients=True)
    pert = np.exp(-20 * np.sum((mesh.node_coords - 0.5) ** 2, axis=1))
    rows = continuous_dependence_experiment(mesh, build_initial_data(mesh), cfg, pert, scales=(0.0, 1e-2))
    assert rows[0].lhs_sq == 0.0 and rows[0].ratio == 0.0
    assert rows[1].lhs_sq > 0 and math.isfinite(rows[1].ratio)
    assert set(rows[1].components) == {"phi", "mu", "dudt", "u", "theta", "p"}
