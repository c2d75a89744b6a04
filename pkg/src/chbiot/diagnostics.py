"""Post-processing: tumor mass, energy series and monitors, contours, Darcy flux,
and the continuous-dependence experiment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from chbiot.assembly import assemble_scalar_mass, assemble_weighted_stiffness
from chbiot.energy import total_energy
from chbiot.fem import Q1Space, space_for
from chbiot.grid import Mesh
from chbiot.material import MaterialTable, double_well
from chbiot.sparse_linalg import SolverConfig, solve_spd


def _space(mesh) -> Q1Space:
    return mesh if isinstance(mesh, Q1Space) else space_for(mesh)


def tumor_mass(mesh, phi) -> float:
    sp = _space(mesh)
    return sp.integrate(sp.values(phi))


class Norms:
    """Discrete L2 / H1 / dual norms built from the Q1 mass and stiffness matrices."""

    def __init__(self, mesh):
        self.space = _space(mesh)
        self.mass = assemble_scalar_mass(self.space)
        self.stiffness = assemble_weighted_stiffness(self.space)

    def l2_sq(self, f):
        return float(f @ self.mass.matvec(f))

    def grad_sq(self, f):
        return float(f @ self.stiffness.matvec(f))

    def h1_sq(self, f):
        return self.l2_sq(f) + self.grad_sq(f)

    def vector_l2_sq(self, u):
        u = np.asarray(u).reshape(-1, 2)
        return self.l2_sq(u[:, 0].copy()) + self.l2_sq(u[:, 1].copy())

    def vector_grad_sq(self, u):
        u = np.asarray(u).reshape(-1, 2)
        return self.grad_sq(u[:, 0].copy()) + self.grad_sq(u[:, 1].copy())

    def vector_h1_sq(self, u):
        return self.vector_l2_sq(u) + self.vector_grad_sq(u)

    def dual_sq(self, f, cfg=SolverConfig(rtol=1e-12)):
        """Squared (H^1)' norm: mean squared plus ||grad w||^2 with -Lap w = f - mean (Neumann)."""
        f = np.asarray(f, dtype=float)
        mean = tumor_mass(self.space, f)
        rhs = self.mass.matvec(f - mean)
        if np.linalg.norm(rhs) == 0.0:
            return mean * mean
        # consistent singular system: pin nothing, CG stays in the range of K
        w, _ = solve_spd(self.stiffness, rhs, cfg)
        return mean * mean + self.grad_sq(w)


@dataclass
class TimeSeriesRow:
    time: float
    tumor_mass: float
    E_phi: float
    E_u: float
    E_theta: float
    E_total: float
    grad_mu_norm_sq: float
    grad_p_norm_sq: float
    outer_iterations: int
    # left-hand side of the a priori energy bound at this time
    energy_bound_lhs: float = float("nan")


class SeriesRecorder:
    """Run hook collecting one ``TimeSeriesRow`` per step plus the energy-bound aggregate.

    The aggregate is
    ``||phi(t)||_H1^2 + int ||mu||_H1^2 + int ||p||_H1^2 + ||p(t)||^2
    + ||Psi(phi(t))||_L1 + int (||u||_H1^2 + ||du/dt||_H1^2)``
    with time integrals accumulated by the right-endpoint rule.
    """

    def __init__(self, mesh: Mesh, material: MaterialTable, model: str, every: int = 1):
        self.mesh = mesh
        self.material = material
        self.model = model
        self.every = max(1, int(every))
        self.norms = Norms(mesh)
        self.rows: list[TimeSeriesRow] = []
        self.all_rows: list[TimeSeriesRow] = []
        self.data_functional = float("nan")
        self._integrals = 0.0
        self._prev = None

    def _aggregate(self, state):
        nm = self.norms
        sp = nm.space
        if self._prev is None:
            self._integrals = 0.0
        else:
            dt = state.time - self._prev.time
            dudt = (state.u - self._prev.u) / dt
            self._integrals += dt * (
                nm.h1_sq(state.mu) + nm.h1_sq(state.p) + nm.vector_h1_sq(state.u) + nm.vector_h1_sq(dudt)
            )
        psi = sp.integrate(np.abs(double_well(sp.values(state.phi))))
        return nm.h1_sq(state.phi) + nm.l2_sq(state.p) + psi + self._integrals

    def __call__(self, index, state, report=None):
        if index == 0:
            nm = self.norms
            self.data_functional = 1.0 + nm.h1_sq(state.phi) + nm.vector_l2_sq(state.u) + nm.l2_sq(state.theta)
            self._prev = None
        e = total_energy(self.mesh, state.phi, state.u, state.theta, self.material, self.model)
        row = TimeSeriesRow(
            time=state.time,
            tumor_mass=tumor_mass(self.mesh, state.phi),
            E_phi=e.E_phi,
            E_u=e.E_u,
            E_theta=e.E_theta,
            E_total=e.total,
            grad_mu_norm_sq=self.norms.grad_sq(state.mu),
            grad_p_norm_sq=self.norms.grad_sq(state.p),
            outer_iterations=0 if report is None else report.outer_iterations,
            energy_bound_lhs=self._aggregate(state),
        )
        self._prev = state.copy()
        self.all_rows.append(row)
        if index % self.every == 0:
            self.rows.append(row)


@dataclass
class MonitorReport:
    passed: bool
    max_lhs: float
    data_functional: float
    ratio: float
    bound: float
    message: str = ""


def energy_inequality_monitor(series, data_functional: float, bound: float = 1e4) -> MonitorReport:
    """Check that the energy-bound aggregate stays below ``bound`` times the data functional."""
    lhs = np.array([row.energy_bound_lhs for row in series], dtype=float)
    if lhs.size == 0:
        return MonitorReport(False, math.nan, data_functional, math.nan, bound, "empty series")
    energies = np.array([row.E_total for row in series], dtype=float)
    if not (np.all(np.isfinite(lhs)) and np.all(np.isfinite(energies)) and math.isfinite(data_functional)):
        return MonitorReport(False, math.nan, data_functional, math.nan, bound, "non-finite values in series")
    max_lhs = float(lhs.max())
    ratio = max_lhs / data_functional
    ok = ratio <= bound
    return MonitorReport(ok, max_lhs, data_functional, ratio, bound, "" if ok else "aggregate exceeds bound")


# -- contours -----------------------------------------------------------------------------

# edges: 0 bottom, 1 right, 2 top, 3 left; corner bits: 1 bl, 2 br, 4 tr, 8 tl
_SEGMENTS = {
    1: ((3, 0),),
    2: ((0, 1),),
    3: ((3, 1),),
    4: ((1, 2),),
    6: ((0, 2),),
    7: ((3, 2),),
    8: ((2, 3),),
    9: ((0, 2),),
    11: ((1, 2),),
    12: ((3, 1),),
    13: ((0, 1),),
    14: ((3, 0),),
}
# saddles: (segments if the cell average is above the level, segments otherwise)
_SADDLES = {
    5: (((0, 1), (2, 3)), ((3, 0), (1, 2))),
    10: (((3, 0), (1, 2)), ((0, 1), (2, 3))),
}


@dataclass
class ContourSet:
    level: float
    polylines: list[np.ndarray] = field(default_factory=list)

    def total_length(self) -> float:
        return float(sum(np.sum(np.linalg.norm(np.diff(pl, axis=0), axis=1)) for pl in self.polylines))

    def closed(self) -> list[np.ndarray]:
        return [pl for pl in self.polylines if len(pl) > 2 and np.allclose(pl[0], pl[-1])]


def marching_squares(mesh: Mesh, field_values, level: float) -> ContourSet:
    """Iso-lines of a nodal field by cell-wise classification and linear edge interpolation."""
    if not math.isfinite(level):
        raise ValueError("contour level must be finite")
    n = mesh.n
    h = mesh.h
    V = np.asarray(field_values, dtype=float).reshape(n + 1, n + 1)  # [j, i]
    above = V > level
    bl, br, tr, tl = above[:-1, :-1], above[:-1, 1:], above[1:, 1:], above[1:, :-1]
    case = bl * 1 + br * 2 + tr * 4 + tl * 8
    jj, ii = np.nonzero((case != 0) & (case != 15))
    if jj.size == 0:
        return ContourSet(level, [])

    # edge ids: horizontal edge (i, j)-(i+1, j) -> j * n + i; vertical (i, j)-(i, j+1) -> H + j * (n + 1) + i
    H = (n + 1) * n

    def edge_point(i, j, e):
        if e == 0:
            key, a, b = j * n + i, (i, j), (i + 1, j)
        elif e == 2:
            key, a, b = (j + 1) * n + i, (i, j + 1), (i + 1, j + 1)
        elif e == 3:
            key, a, b = H + j * (n + 1) + i, (i, j), (i, j + 1)
        else:
            key, a, b = H + j * (n + 1) + i + 1, (i + 1, j), (i + 1, j + 1)
        va, vb = V[a[1], a[0]], V[b[1], b[0]]
        t = (level - va) / (vb - va)
        x = (a[0] + t * (b[0] - a[0])) * h
        y = (a[1] + t * (b[1] - a[1])) * h
        return key, (x, y)

    points: dict[int, tuple[float, float]] = {}
    neighbours: dict[int, list[int]] = {}
    for j, i in zip(jj.tolist(), ii.tolist()):
        c = int(case[j, i])
        if c in _SADDLES:
            centre = 0.25 * (V[j, i] + V[j, i + 1] + V[j + 1, i + 1] + V[j + 1, i])
            segs = _SADDLES[c][0 if centre > level else 1]
        else:
            segs = _SEGMENTS[c]
        for e0, e1 in segs:
            k0, p0 = edge_point(i, j, e0)
            k1, p1 = edge_point(i, j, e1)
            points[k0] = p0
            points[k1] = p1
            neighbours.setdefault(k0, []).append(k1)
            neighbours.setdefault(k1, []).append(k0)

    polylines = []
    unused = {k: list(v) for k, v in neighbours.items()}

    def walk(start):
        chain = [start]
        cur = start
        while unused[cur]:
            nxt = unused[cur].pop()
            unused[nxt].remove(cur)
            chain.append(nxt)
            cur = nxt
        return chain

    # open chains start at points of degree one (contour meets the boundary)
    for k in sorted(neighbours):
        if len(neighbours[k]) == 1 and unused[k]:
            polylines.append(walk(k))
    for k in sorted(neighbours):
        if unused[k]:
            polylines.append(walk(k))
    return ContourSet(level, [np.array([points[k] for k in chain]) for chain in polylines])


def boundary_arcs(mesh: Mesh, field_values, level: float) -> list[np.ndarray]:
    """Stretches of the domain boundary where the field exceeds ``level``.

    Together with the open iso-lines these close every superlevel region that
    touches the boundary. The field is linear along boundary edges, so the arc
    endpoints coincide with the endpoints of the open marching-squares chains.
    """
    n, h = mesh.n, mesh.h
    V = np.asarray(field_values, dtype=float).reshape(n + 1, n + 1)
    up, down = np.arange(n), np.arange(n, 0, -1)
    i = np.concatenate([up, np.full(n, n), down, np.zeros(n, dtype=int)])
    j = np.concatenate([np.zeros(n, dtype=int), up, np.full(n, n), down])
    vals = V[j, i]
    xy = np.column_stack([i, j]) * h
    above = vals > level
    if above.all():
        return [np.vstack([xy, xy[:1]])]
    if not above.any():
        return []

    m = vals.size
    first = int(np.argmin(above))  # start the walk below the level
    arcs, cur = [], None
    for k in range(m):
        a, b = (first + k) % m, (first + k + 1) % m
        if above[a]:
            cur.append(xy[a])
        if above[a] != above[b]:
            t = (level - vals[a]) / (vals[b] - vals[a])
            p = xy[a] + t * (xy[b] - xy[a])
            if above[b]:
                cur = [p]
            else:
                cur.append(p)
                arcs.append(np.array(cur))
                cur = None
    return arcs


def points_inside(contours: ContourSet, points, closure=()) -> np.ndarray:
    """Even-odd point-in-polygon test against the segments of every polyline.

    Polylines are not closed implicitly; open iso-lines need the matching
    ``closure`` arcs (see :func:`boundary_arcs`) to bound a region.
    """
    pts = np.asarray(points, dtype=float)
    inside = np.zeros(len(pts), dtype=bool)
    x, y = pts[:, 0], pts[:, 1]
    for poly in [*contours.polylines, *closure]:
        for (x0, y0), (x1, y1) in zip(poly[:-1], poly[1:]):
            crosses = (y0 > y) != (y1 > y)
            if not np.any(crosses):
                continue
            xc = x0 + (y - y0) * (x1 - x0) / np.where(y1 != y0, y1 - y0, 1.0)
            inside ^= crosses & (x < xc)
    return inside


def contours_nested(mesh: Mesh, phi, inner_level=0.9, outer_level=0.5) -> bool:
    """Every cell centre enclosed by the inner-level region is also enclosed by the outer one."""
    centres = mesh.node_coords[mesh.elements].mean(axis=1)
    regions = []
    for level in (inner_level, outer_level):
        lines = marching_squares(mesh, phi, level)
        regions.append(points_inside(lines, centres, boundary_arcs(mesh, phi, level)))
    in_inner, in_outer = regions
    return bool(np.all(in_outer[in_inner]))


# -- Darcy flux ------------------------------------------------------------------------------


def darcy_velocity(mesh, phi, p, material: MaterialTable) -> np.ndarray:
    """Cellwise ``-kappa(phi) grad p`` at element centres, shape (num_elements, 2)."""
    sp = _space(mesh)
    phi_c = np.asarray(phi, dtype=float)[sp.conn] @ sp.center_N[0]
    p_loc = np.asarray(p, dtype=float)[sp.conn]
    grad = np.column_stack([p_loc @ sp.center_dNx[0], p_loc @ sp.center_dNy[0]])
    return -material.kappa(phi_c)[:, None] * grad


# -- continuous dependence on the data ---------------------------------------------------------


@dataclass
class DependenceRow:
    scale: float
    lhs_sq: float
    rhs_sq: float
    ratio: float
    components: dict


def _difference_norms(norms: Norms, traj_a, traj_b):
    """Squared norms of the differences of two trajectories (lists of states at equal times)."""
    phi_dual_max = u_h1_max = p_l2_max = 0.0
    phi_l2 = mu_dual = dudt_h1 = theta_l2 = p_h1 = 0.0
    prev = None
    for sa, sb in zip(traj_a, traj_b):
        d_phi = sa.phi - sb.phi
        d_u = sa.u - sb.u
        d_p = sa.p - sb.p
        phi_dual_max = max(phi_dual_max, norms.dual_sq(d_phi))
        u_h1_max = max(u_h1_max, norms.vector_grad_sq(d_u))
        p_l2_max = max(p_l2_max, norms.l2_sq(d_p))
        if prev is not None:
            dt = sa.time - prev[0]
            phi_l2 += dt * norms.l2_sq(d_phi)
            mu_dual += dt * norms.dual_sq(sa.mu - sb.mu)
            dudt_h1 += dt * norms.vector_grad_sq((d_u - prev[1]) / dt)
            theta_l2 += dt * norms.l2_sq(sa.theta - sb.theta)
            p_h1 += dt * norms.h1_sq(d_p)
        prev = (sa.time, d_u)
    return {
        "phi": phi_dual_max + phi_l2,
        "mu": mu_dual,
        "dudt": dudt_h1,
        "u": u_h1_max,
        "theta": theta_l2,
        "p": p_l2_max + p_h1,
    }


def continuous_dependence_experiment(mesh: Mesh, initial, cfg, perturbation, scales=(1e-1, 1e-2, 1e-3)):
    """Run pairs (data, data + s * perturbation of phi0) and compare solution and data differences.

    ``cfg`` must be a constant-coefficient ``TimeStepConfig``. Returns one
    ``DependenceRow`` per scale with the squared left-hand side, the squared
    data norm and their ratio.
    """
    from chbiot.stepper import run

    if not cfg.constant_coefficients:
        raise ValueError("continuous dependence needs constant coefficients (constant_coefficients = true)")
    norms = Norms(mesh)

    def trajectory(start):
        states = []
        run(mesh, start, cfg, sinks=[lambda k, s, r: states.append(s.copy())])
        return states

    base = trajectory(initial)
    rows = []
    for s in scales:
        start = initial.copy()
        start.phi = start.phi + s * np.asarray(perturbation, dtype=float)
        other = trajectory(start)
        comps = _difference_norms(norms, other, base)
        lhs = float(sum(comps.values()))
        rhs = norms.dual_sq(start.phi - initial.phi) + norms.vector_grad_sq(start.u - initial.u) + norms.l2_sq(
            start.theta - initial.theta
        )
        ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
        rows.append(DependenceRow(float(s), lhs, rhs, ratio, comps))
    return rows
