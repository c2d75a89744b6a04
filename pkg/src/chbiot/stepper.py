"""Time stepping by iterative decoupling.

One step alternates two sub-solves until the iterates settle:

1. the linear flow-mechanics block for (u, theta, p) with the phase field
   frozen at its current iterate, solved monolithically;
2. the Cahn-Hilliard block for (phi, mu) with (u, theta, p) frozen, solved
   by Newton's method.

The Cahn-Hilliard block is semi-implicit: the linear part of the well
derivative and the elastic/fluid phi-derivatives are implicit, the cubic part
of the well derivative, the mobility and the growth source are taken from the
previous time level.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from chbiot.energy import elastic_density, fluid_density
from chbiot.fem import Q1Space, space_for
from chbiot.grid import Mesh, build_dofmap, nested_dissection_order
from chbiot.material import DEFAULT_MATERIAL, MaterialTable, double_well_prime_expansive, isotropic_apply
from chbiot.sparse_linalg import (
    LUPreconditioner,
    SolverConfig,
    SolverFailure,
    SparsityPattern,
    eliminate_dofs,
    solve_general,
    solve_spd,
)

log = logging.getLogger(__name__)

MODELS = ("ch", "cl", "chb")
LINEAR_SOLVERS = ("lu-bicgstab", "jacobi-bicgstab")


class StepFailure(RuntimeError):
    """A time step could not be completed (Newton, decoupling or linear solver)."""

    def __init__(self, message, residual=np.nan, report=None):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual
        self.report = report


class RunAborted(RuntimeError):
    def __init__(self, step_index, cause):
        super().__init__(f"run aborted at step {step_index}: {cause}")
        self.step_index = step_index
        self.cause = cause


@dataclass
class State:
    phi: np.ndarray
    mu: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    time: float = 0.0

    def copy(self) -> "State":
        return State(self.phi.copy(), self.mu.copy(), self.u.copy(), self.theta.copy(), self.p.copy(), self.time)

    @classmethod
    def zeros(cls, mesh: Mesh) -> "State":
        n = mesh.num_nodes
        return cls(np.zeros(n), np.zeros(n), np.zeros(2 * n), np.zeros(n), np.zeros(n), 0.0)


@dataclass(frozen=True)
class TimeStepConfig:
    dt: float = 2.0**-7
    t_final: float = 1.5
    model: str = "chb"
    material: MaterialTable = DEFAULT_MATERIAL
    decoupling_tol: float = 1e-6
    decoupling_max_iters: int = 50
    newton_tol: float = 1e-9
    newton_max_iters: int = 25
    constant_coefficients: bool = False
    linear: SolverConfig = SolverConfig()
    # Krylov preconditioning of the block solves: a lagged sparse LU of the
    # block operator, or plain Jacobi scaling
    linear_solver: str = "lu-bicgstab"
    refactor_after: int = 12

    def __post_init__(self):
        object.__setattr__(self, "model", self.model.lower())
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.linear_solver not in LINEAR_SOLVERS:
            raise ValueError(f"linear_solver must be one of {LINEAR_SOLVERS}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_final < 0:
            raise ValueError("t_final must be non-negative")
        if not (self.decoupling_tol > 0 and self.newton_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.decoupling_max_iters < 1 or self.newton_max_iters < 1:
            raise ValueError("iteration caps must be positive")

    @property
    def effective_material(self) -> MaterialTable:
        if self.constant_coefficients and not self.material.is_constant_coefficient:
            return self.material.constant_coefficient_variant()
        return self.material

    def step_sizes(self) -> list[float]:
        """Fixed steps of ``dt`` with a shortened last step if ``t_final`` is not a multiple."""
        if self.t_final == 0:
            return []
        count = math.ceil(self.t_final / self.dt - 1e-9)
        last = self.t_final - (count - 1) * self.dt
        return [self.dt] * (count - 1) + [last]


@dataclass
class NewtonStats:
    iterations: int
    residuals: list[float]
    linear_iterations: list[int] = field(default_factory=list)


@dataclass
class DecouplingReport:
    outer_iterations: int = 0
    final_relative_change: float = np.inf
    changes: list[float] = field(default_factory=list)
    newton_iterations_per_outer: list[int] = field(default_factory=list)
    linear_iterations: list[int] = field(default_factory=list)
    linear_residuals: list[float] = field(default_factory=list)
    converged: bool = False


def _rel_change(new, old):
    return float(np.linalg.norm(new - old) / (np.linalg.norm(new) + 1e-12))


class Stepper:
    """Holds the mesh-dependent operators and patterns reused by every step."""

    def __init__(self, mesh: Mesh, cfg: TimeStepConfig):
        self.mesh = mesh
        self.cfg = cfg
        self.material = cfg.effective_material
        self.space: Q1Space = space_for(mesh)
        self.dofmap = build_dofmap(mesh)
        sp = self.space
        N = mesh.num_nodes
        self.N = N
        ones = np.ones((sp.conn.shape[0], sp.nq))
        self.mass_local = sp.local_matrices(ones, sp.mass_table)
        self.stiff_local = sp.local_matrices(ones, sp.stiffness_table)
        self.mass = sp.scalar_pattern.assemble(self.mass_local)
        self.stiffness = sp.scalar_pattern.assemble(self.stiff_local)

        vc, sc = sp.vector_conn, sp.conn
        pi = sp.pattern_indices
        # monolithic flow-mechanics layout: [u (2N), theta (N), p (N)]
        th, pr = 2 * N, 3 * N
        uu = pi(vc, vc)
        up = pi(vc, sc, 0, pr)
        tt = pi(sc, sc, th, th)
        tp = pi(sc, sc, th, pr)
        pu_r, pu_c = pi(vc, sc, 0, pr)[::-1]
        pt = pi(sc, sc, pr, th)
        pp = pi(sc, sc, pr, pr)
        blocks = [uu, up, tt, tp, (pu_r, pu_c), pt, pp]
        self.flow_pattern = SparsityPattern(
            np.concatenate([b[0] for b in blocks]), np.concatenate([b[1] for b in blocks]), (4 * N, 4 * N)
        )
        self.flow_mask = np.zeros(4 * N, dtype=bool)
        self.flow_mask[: 2 * N] = self.dofmap.dirichlet_mask

        # Cahn-Hilliard layout: [phi (N), mu (N)]
        ch_blocks = [pi(sc, sc), pi(sc, sc, 0, N), pi(sc, sc, N, 0), pi(sc, sc, N, N)]
        self.ch_pattern = SparsityPattern(
            np.concatenate([b[0] for b in ch_blocks]), np.concatenate([b[1] for b in ch_blocks]), (2 * N, 2 * N)
        )

        # node-interleaved, fill-reducing unknown orderings for the LU preconditioners
        nodes = nested_dissection_order(mesh)
        self.flow_order = np.column_stack([2 * nodes, 2 * nodes + 1, th + nodes, pr + nodes]).ravel()
        self.elastic_order = np.column_stack([2 * nodes, 2 * nodes + 1]).ravel()
        self.ch_order = np.column_stack([nodes, N + nodes]).ravel()
        self._precond: dict[str, LUPreconditioner] = {}

    def _solve(self, key, A, b, x0=None, spd=False):
        """Block solve with a lagged LU preconditioner, refreshed when it stops paying off."""
        cfg = self.cfg
        solver = solve_spd if spd else solve_general
        if cfg.linear_solver == "jacobi-bicgstab":
            return solver(A, b, cfg.linear, x0=x0)
        order = {"flow": self.flow_order, "elastic": self.elastic_order, "ch": self.ch_order}[key]
        fresh = key not in self._precond
        if fresh:
            self._precond[key] = LUPreconditioner(A, order)
        try:
            x, info = solver(A, b, replace(cfg.linear, max_iterations=4 * cfg.refactor_after), x0=x0, preconditioner=self._precond[key])
        except SolverFailure:
            if fresh:
                raise
            self._precond[key] = LUPreconditioner(A, order)
            x, info = solver(A, b, cfg.linear, x0=x0, preconditioner=self._precond[key])
            fresh = True
        if info.iterations > cfg.refactor_after and not fresh:
            del self._precond[key]
        return x, info

    # -- flow and mechanics ----------------------------------------------------------

    def _elastic_local(self, phi_q, dt):
        sp = self.space
        lam, G = self.material.lame(phi_q)
        cv = self.material.Cv_scale / dt
        return sp.local_matrices(lam, sp.lambda_table) + sp.local_matrices(2.0 * G + cv, sp.strain_table), lam, G

    def _elastic_load(self, phi_q, lam, G, u_old, dt):
        sp = self.space
        mat = self.material
        load = sp.stress_load(isotropic_apply(lam, G, mat.eigenstrain(phi_q)))
        cv = mat.Cv_scale / dt
        if cv != 0.0:
            load += sp.stress_load(cv * sp.strain(u_old))
        if any(mat.source_u):
            load += sp.vector_load(np.broadcast_to(np.asarray(mat.source_u), phi_q.shape + (2,)))
        return load

    def flow_system(self, old: State, phi, dt):
        """Assembled monolithic matrix and right-hand side before constraints."""
        sp = self.space
        mat = self.material
        phi_q = sp.values(phi)
        A_loc, lam, G = self._elastic_local(phi_q, dt)
        alpha = mat.alpha(phi_q)
        M = mat.M(phi_q)
        kappa = mat.kappa(phi_q)
        B_loc = sp.local_matrices(alpha, sp.div_scalar_table)
        C_loc = sp.local_matrices(M * alpha, sp.div_scalar_table)
        K_loc = sp.local_matrices(kappa, sp.stiffness_table)
        D_loc = sp.local_matrices(M, sp.mass_table)
        values = np.concatenate(
            [
                A_loc.ravel(),
                -B_loc.ravel(),
                (self.mass_local / dt).ravel(),
                K_loc.ravel(),
                C_loc.ravel(),
                -D_loc.ravel(),
                self.mass_local.ravel(),
            ]
        )
        A = self.flow_pattern.assemble(values)
        N = self.N
        rhs = np.zeros(4 * N)
        rhs[: 2 * N] = self._elastic_load(phi_q, lam, G, old.u, dt)
        rhs[2 * N : 3 * N] = self.mass.matvec(old.theta) / dt
        if mat.source_theta:
            rhs[2 * N : 3 * N] += sp.load(np.full(phi_q.shape, mat.source_theta))
        return A, rhs

    def elasticity_system(self, old: State, phi, dt):
        sp = self.space
        phi_q = sp.values(phi)
        A_loc, lam, G = self._elastic_local(phi_q, dt)
        return sp.vector_pattern.assemble(A_loc), self._elastic_load(phi_q, lam, G, old.u, dt)

    def step_flow_mechanics(self, old: State, phi, dt=None, guess=None, report: DecouplingReport | None = None):
        """Solve the (u, theta, p) block with phi frozen; returns ``(u, theta, p)``."""
        cfg = self.cfg
        dt = cfg.dt if dt is None else dt
        N = self.N
        if cfg.model == "ch":
            raise ValueError("the Cahn-Hilliard variant has no flow-mechanics block")
        if cfg.model == "cl":
            A, b = self.elasticity_system(old, phi, dt)
            A, b = eliminate_dofs(A, b, self.dofmap.dirichlet_mask)
            x0 = None if guess is None else guess[0]
            u, info = self._solve("elastic", A, b, x0=x0, spd=True)
            u[self.dofmap.dirichlet_mask] = 0.0
            theta, p = old.theta.copy(), old.p.copy()
        else:
            A, b = self.flow_system(old, phi, dt)
            A, b = eliminate_dofs(A, b, self.flow_mask)
            x0 = None if guess is None else np.concatenate(guess)
            x, info = self._solve("flow", A, b, x0=x0)
            u, theta, p = x[: 2 * N].copy(), x[2 * N : 3 * N].copy(), x[3 * N :].copy()
            u[self.dofmap.dirichlet_mask] = 0.0
        if report is not None:
            report.linear_iterations.append(info.iterations)
            report.linear_residuals.append(info.residual)
        return u, theta, p

    # -- Cahn-Hilliard ---------------------------------------------------------------------

    def _coupling_terms(self, phi_q, eps, div, theta_q, order):
        """phi-derivatives of the elastic/fluid densities entering the chemical potential."""
        model = self.cfg.model
        mat = self.material
        zero = np.zeros_like(phi_q)
        d1, d2 = zero, zero
        if model in ("cl", "chb"):
            _, a1, a2 = elastic_density(mat, phi_q, eps, order=2)
            d1, d2 = d1 + a1, d2 + a2
        if model == "chb":
            _, b1, b2 = fluid_density(mat, phi_q, div, theta_q, order=2)
            d1, d2 = d1 + b1, d2 + b2
        return d1, d2

    def ch_residual_and_jacobian(self, old: State, phi, mu, uip, dt, want_jacobian=True):
        sp = self.space
        mat = self.material
        u, theta, _ = uip
        N = self.N
        phi_old_q = sp.values(old.phi)
        phi_q = sp.values(phi)
        eps = sp.strain(u)
        div = eps[..., 0] + eps[..., 1]
        theta_q = sp.values(theta)
        d1, d2 = self._coupling_terms(phi_q, eps, div, theta_q, order=2)

        m_q = mat.mobility(phi_old_q)
        Km_loc = sp.local_matrices(m_q, sp.stiffness_table)
        Km = sp.scalar_pattern.assemble(Km_loc)
        Mphi = self.mass.matvec(phi)
        Kphi = self.stiffness.matvec(phi)
        r1 = (Mphi - self.mass.matvec(old.phi)) / dt + Km.matvec(mu) - sp.load(mat.source_phi(phi_old_q))
        r2 = (
            -self.mass.matvec(mu)
            + mat.gamma * Kphi
            + 0.75 * Mphi
            + sp.load(double_well_prime_expansive(phi_old_q) + d1)
        )
        R = np.concatenate([r1, r2])
        if not want_jacobian:
            return R, None
        J21 = mat.gamma * self.stiff_local + 0.75 * self.mass_local + sp.local_matrices(d2, sp.mass_table)
        values = np.concatenate([(self.mass_local / dt).ravel(), Km_loc.ravel(), J21.ravel(), -self.mass_local.ravel()])
        return R, self.ch_pattern.assemble(values)

    def step_cahn_hilliard_newton(self, old: State, uip, dt=None, guess=None):
        """Newton solve of the (phi, mu) block; returns ``(phi, mu, NewtonStats)``."""
        cfg = self.cfg
        dt = cfg.dt if dt is None else dt
        N = self.N
        if guess is None:
            phi, mu = old.phi.copy(), old.mu.copy()
        else:
            phi, mu = guess[0].copy(), guess[1].copy()
        residuals = []
        lin_its = []
        for it in range(cfg.newton_max_iters + 1):
            R, J = self.ch_residual_and_jacobian(old, phi, mu, uip, dt)
            res = float(np.linalg.norm(R))
            residuals.append(res)
            if not np.isfinite(res):
                raise StepFailure("Newton residual is not finite", res)
            if res <= cfg.newton_tol:
                return phi, mu, NewtonStats(it, residuals, lin_its)
            if it == cfg.newton_max_iters:
                break
            try:
                delta, info = self._solve("ch", J, -R)
            except SolverFailure as exc:
                raise StepFailure(f"linear solve inside Newton failed: {exc}", exc.residual) from exc
            lin_its.append(info.iterations)
            phi = phi + delta[:N]
            mu = mu + delta[N:]
        raise StepFailure(f"Newton did not converge in {cfg.newton_max_iters} iterations", residuals[-1])

    # -- one step ------------------------------------------------------------------------------

    def advance(self, old: State, dt=None):
        cfg = self.cfg
        dt = cfg.dt if dt is None else dt
        report = DecouplingReport()
        phi, mu = old.phi.copy(), old.mu.copy()
        u, theta, p = old.u.copy(), old.theta.copy(), old.p.copy()
        coupled = cfg.model != "ch"
        try:
            for k in range(1, cfg.decoupling_max_iters + 1):
                prev = (phi, u, p)
                if coupled:
                    u, theta, p = self.step_flow_mechanics(old, phi, dt, guess=(u, theta, p), report=report)
                phi, mu, stats = self.step_cahn_hilliard_newton(old, (u, theta, p), dt, guess=(phi, mu))
                report.newton_iterations_per_outer.append(stats.iterations)
                change = max(_rel_change(new, prv) for new, prv in zip((phi, u, p), prev))
                report.changes.append(change)
                report.outer_iterations = k
                report.final_relative_change = change
                if not coupled or change < cfg.decoupling_tol:
                    report.converged = True
                    break
        except SolverFailure as exc:
            raise StepFailure(f"linear solve failed: {exc}", exc.residual, report) from exc
        if not report.converged:
            raise StepFailure("iterative decoupling did not converge", report.final_relative_change, report)
        if coupled:
            # make (u, theta, p) consistent with the accepted phase field
            try:
                u, theta, p = self.step_flow_mechanics(old, phi, dt, guess=(u, theta, p), report=report)
            except SolverFailure as exc:
                raise StepFailure(f"linear solve failed: {exc}", exc.residual, report) from exc
        new = State(phi, mu, u, theta, p, old.time + dt)
        return new, report


def advance(mesh: Mesh, state: State, cfg: TimeStepConfig, stepper: Stepper | None = None):
    """Advance one step of size ``cfg.dt``; returns ``(State, DecouplingReport)``."""
    stepper = stepper or Stepper(mesh, cfg)
    return stepper.advance(state)


StepHook = Callable[[int, State, "DecouplingReport | None"], None]


def run(mesh: Mesh, initial: State, cfg: TimeStepConfig, sinks: Iterable[StepHook] = ()) -> State:
    """March from ``initial`` to ``cfg.t_final``.

    Each hook is called as ``hook(step_index, state, report)``, first with
    index 0 and ``report=None`` for the initial state. A failed step is retried
    once as two half steps; a second failure aborts the run.
    """
    sinks = list(sinks)
    stepper = Stepper(mesh, cfg)
    state = initial.copy()
    for hook in sinks:
        hook(0, state, None)
    t0 = initial.time
    sizes = cfg.step_sizes()
    for index, dt in enumerate(sizes, start=1):
        try:
            state, report = stepper.advance(state, dt)
        except StepFailure as first:
            log.warning("step %d failed (%s); retrying with two half steps", index, first)
            try:
                half, _ = stepper.advance(state, 0.5 * dt)
                state, report = stepper.advance(half, 0.5 * dt)
            except StepFailure as second:
                raise RunAborted(index, second) from second
        # keep the clock free of accumulated rounding
        state.time = t0 + (cfg.t_final if index == len(sizes) else index * cfg.dt)
        log.debug("step %d t=%.6f outer=%d change=%.2e", index, state.time, report.outer_iterations, report.final_relative_change)
        for hook in sinks:
            hook(index, state, report)
    return state
