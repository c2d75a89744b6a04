"""Free energy of a state and its variational derivatives.

Every integral uses the 2x2 Gauss rule of :mod:`chbiot.fem`, so the nodal
derivatives below are exact gradients of the discrete energies. Nodal
derivative fields are reported against the lumped mass (``load / row sum``);
the weak forms that enter the solver work with the load vectors directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from chbiot.fem import Q1Space, space_for
from chbiot.material import MaterialTable, ddot, double_well, double_well_prime, isotropic_apply
from chbiot.sparse_linalg import SolverConfig, solve_spd


def _space(mesh) -> Q1Space:
    return mesh if isinstance(mesh, Q1Space) else space_for(mesh)


@dataclass
class EnergyReport:
    E_phi: float
    E_u: float
    E_theta: float
    total: float
    grad_mu_norm_sq: float = 0.0
    grad_p_norm_sq: float = 0.0


# -- pointwise densities ---------------------------------------------------------


def elastic_density(material: MaterialTable, phi_q, eps_q, order=0):
    """W = 1/2 e:C(phi)e with e = eps - T(phi), and its phi-derivatives up to ``order``."""
    e = eps_q - material.eigenstrain(phi_q)
    lam, G = material.lame(phi_q)
    Ce = isotropic_apply(lam, G, e)
    W = 0.5 * ddot(e, Ce)
    if order == 0:
        return W
    Tp = material.eigenstrain_prime(phi_q)
    lam1, G1 = material.lame_prime(phi_q)
    C1e = isotropic_apply(lam1, G1, e)
    dW = 0.5 * ddot(e, C1e) - ddot(Tp, Ce)
    if order == 1:
        return W, dW
    lam2, G2 = material.lame_second(phi_q)
    d2W = 0.5 * ddot(e, isotropic_apply(lam2, G2, e)) - 2.0 * ddot(Tp, C1e) + ddot(Tp, isotropic_apply(lam, G, Tp))
    return W, dW, d2W


def fluid_density(material: MaterialTable, phi_q, div_q, theta_q, order=0):
    """W = M(phi)/2 (theta - alpha(phi) div u)^2 and its phi-derivatives up to ``order``."""
    M = material.M(phi_q)
    r = theta_q - material.alpha(phi_q) * div_q
    W = 0.5 * M * r * r
    if order == 0:
        return W
    M1 = material.M_prime(phi_q)
    a1d = material.alpha_prime(phi_q) * div_q
    dW = 0.5 * M1 * r * r - M * r * a1d
    if order == 1:
        return W, dW
    M2 = material.M_second(phi_q)
    a2d = material.alpha_second(phi_q) * div_q
    d2W = 0.5 * M2 * r * r - 2.0 * M1 * r * a1d + M * a1d * a1d - M * r * a2d
    return W, dW, d2W


# -- energies -------------------------------------------------------------------------


def energy_surface(mesh, phi, material: MaterialTable) -> float:
    sp = _space(mesh)
    phi_q = sp.values(phi)
    g = sp.gradients(phi)
    return sp.integrate(double_well(phi_q) + 0.5 * material.gamma * np.sum(g * g, axis=-1))


def energy_elastic(mesh, phi, u, material: MaterialTable) -> float:
    sp = _space(mesh)
    return sp.integrate(elastic_density(material, sp.values(phi), sp.strain(u)))


def energy_fluid(mesh, phi, u, theta, material: MaterialTable) -> float:
    sp = _space(mesh)
    return sp.integrate(fluid_density(material, sp.values(phi), sp.divergence(u), sp.values(theta)))


def total_energy(mesh, phi, u, theta, material: MaterialTable, model="chb") -> EnergyReport:
    """Energy of the chosen model variant: CH keeps only the surface part, CL drops the fluid part."""
    model = model.lower()
    e_phi = energy_surface(mesh, phi, material)
    e_u = energy_elastic(mesh, phi, u, material) if model in ("cl", "chb") else 0.0
    e_th = energy_fluid(mesh, phi, u, theta, material) if model == "chb" else 0.0
    return EnergyReport(e_phi, e_u, e_th, e_phi + e_u + e_th)


def lumped_mass(mesh) -> np.ndarray:
    sp = _space(mesh)
    return sp.load(np.ones((sp.conn.shape[0], sp.nq)))


# -- weak derivatives (load vectors) -----------------------------------------------------


def dphi_surface_load(mesh, phi, material: MaterialTable):
    from chbiot.assembly import assemble_weighted_stiffness

    sp = _space(mesh)
    K = assemble_weighted_stiffness(sp, material.gamma)
    return sp.load(double_well_prime(sp.values(phi))) + K.matvec(np.asarray(phi, dtype=float))


def dphi_elastic_load(mesh, phi, u, material: MaterialTable):
    sp = _space(mesh)
    _, dW = elastic_density(material, sp.values(phi), sp.strain(u), order=1)
    return sp.load(dW)


def dphi_fluid_load(mesh, phi, u, theta, material: MaterialTable):
    sp = _space(mesh)
    _, dW = fluid_density(material, sp.values(phi), sp.divergence(u), sp.values(theta), order=1)
    return sp.load(dW)


def dtheta_fluid_load(mesh, phi, u, theta, material: MaterialTable):
    sp = _space(mesh)
    phi_q = sp.values(phi)
    return sp.load(material.M(phi_q) * (sp.values(theta) - material.alpha(phi_q) * sp.divergence(u)))


def du_elastic_load(mesh, phi, u, material: MaterialTable):
    sp = _space(mesh)
    phi_q = sp.values(phi)
    lam, G = material.lame(phi_q)
    return sp.stress_load(isotropic_apply(lam, G, sp.strain(u) - material.eigenstrain(phi_q)))


def du_fluid_load(mesh, phi, u, theta, material: MaterialTable):
    sp = _space(mesh)
    phi_q = sp.values(phi)
    alpha = material.alpha(phi_q)
    p = material.M(phi_q) * (sp.values(theta) - alpha * sp.divergence(u))
    return -sp.divergence_load(alpha * p)


def du_energy_load(mesh, phi, u, theta, material: MaterialTable):
    """Gradient of E_u + E_theta with respect to the nodal displacement.

    Equals ``(C(phi)(eps(u) - T(phi)) - alpha(phi) p I, eps(v))`` with the
    pressure taken pointwise as ``M(phi)(theta - alpha(phi) div u)``.
    """
    return du_elastic_load(mesh, phi, u, material) + du_fluid_load(mesh, phi, u, theta, material)


# -- nodal derivative fields --------------------------------------------------------------


def dphi_energy_elastic(mesh, phi, u, material: MaterialTable):
    return dphi_elastic_load(mesh, phi, u, material) / lumped_mass(mesh)


def dphi_energy_fluid(mesh, phi, theta, u, material: MaterialTable):
    return dphi_fluid_load(mesh, phi, u, theta, material) / lumped_mass(mesh)


def dphi_energy_surface(mesh, phi, material: MaterialTable):
    return dphi_surface_load(mesh, phi, material) / lumped_mass(mesh)


def pressure_closure(mesh, phi, theta, u, material: MaterialTable, cfg: SolverConfig = SolverConfig(rtol=1e-12)):
    """Consistent L2 projection of ``M(phi)(theta - alpha(phi) div u)`` onto Q1."""
    from chbiot.assembly import assemble_scalar_mass

    sp = _space(mesh)
    rhs = dtheta_fluid_load(sp, phi, u, theta, material)
    p, _ = solve_spd(assemble_scalar_mass(sp), rhs, cfg)
    return p


# -- finite-difference validation ----------------------------------------------------------

COMPONENTS = ("surface", "elastic", "fluid")


def _energy_and_gradient(component, mesh, material, phi, u, theta):
    """Energy as a function of (phi, u, theta) and its gradient blocks at the given point."""
    if component == "surface":
        zero_u, zero_t = np.zeros_like(u), np.zeros_like(theta)
        return (lambda f, w, t: energy_surface(mesh, f, material)), (dphi_surface_load(mesh, phi, material), zero_u, zero_t)
    if component == "elastic":
        grads = (dphi_elastic_load(mesh, phi, u, material), du_elastic_load(mesh, phi, u, material), np.zeros_like(theta))
        return (lambda f, w, t: energy_elastic(mesh, f, w, material)), grads
    if component == "fluid":
        grads = (
            dphi_fluid_load(mesh, phi, u, theta, material),
            du_fluid_load(mesh, phi, u, theta, material),
            dtheta_fluid_load(mesh, phi, u, theta, material),
        )
        return (lambda f, w, t: energy_fluid(mesh, f, w, t, material)), grads
    raise ValueError(f"unknown energy component {component!r}; expected one of {COMPONENTS}")


def fd_validate(component, mesh, material: MaterialTable, state, direction, step=1e-4, floor=1e-12) -> float:
    """Relative mismatch between the analytic and central-difference directional derivative.

    ``state`` needs ``phi``, ``u`` and ``theta`` attributes. ``direction`` is
    either a nodal phi perturbation or a triple ``(v_phi, v_u, v_theta)``.
    Returns ``|<dE, v> - (E(x + s v) - E(x - s v)) / 2s| / max(|<dE, v>|, floor)``;
    raise ``floor`` to get an absolute error near stationary points.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = tuple(np.asarray(a, dtype=float) for a in (state.phi, state.u, state.theta))
    if isinstance(direction, (tuple, list)):
        v = tuple(np.asarray(a, dtype=float) for a in direction)
    else:
        v = (np.asarray(direction, dtype=float), np.zeros_like(x[1]), np.zeros_like(x[2]))
    if any(a.shape != b.shape for a, b in zip(x, v)):
        raise ValueError("direction blocks must match the state shapes")
    energy, grads = _energy_and_gradient(component, mesh, material, *x)
    analytic = float(sum(g @ d for g, d in zip(grads, v)))
    plus = energy(*(a + step * d for a, d in zip(x, v)))
    minus = energy(*(a - step * d for a, d in zip(x, v)))
    fd = (plus - minus) / (2.0 * step)
    return abs(analytic - fd) / max(abs(analytic), floor)
