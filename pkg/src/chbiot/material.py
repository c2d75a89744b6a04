"""Phase-dependent constitutive laws.

Symmetric 2x2 tensors are passed around either as full ``(..., 2, 2)`` arrays
(public helpers) or as component triples ``(xx, yy, xy)`` on the last axis
(internal, used by the quadrature code). In component form the double
contraction is ``a:b = a_xx b_xx + a_yy b_yy + 2 a_xy b_xy``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import numpy as np


class ElasticModuli(NamedTuple):
    G: float
    lam: float


def lame_from_young_poisson(E, nu) -> ElasticModuli:
    """Plane-strain shear modulus and Lame parameter from Young's modulus and Poisson's ratio."""
    if np.any(np.asarray(E) <= 0):
        raise ValueError("Young's modulus must be positive")
    if np.any(np.asarray(nu) >= 0.5) or np.any(np.asarray(nu) < 0):
        raise ValueError("Poisson ratio must lie in [0, 0.5)")
    G = E / (2.0 + 2.0 * nu)
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return ElasticModuli(G, lam)


# -- interpolation ---------------------------------------------------------------


def smoothstep(phi):
    """Cubic interpolation 3x^2 - 2x^3 on [0, 1], clamped to 0 / 1 outside."""
    x = np.clip(phi, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def smoothstep_prime(phi):
    phi = np.asarray(phi, dtype=float)
    inside = (phi > 0.0) & (phi < 1.0)
    return np.where(inside, 6.0 * phi * (1.0 - phi), 0.0)


def smoothstep_second(phi):
    phi = np.asarray(phi, dtype=float)
    inside = (phi > 0.0) & (phi < 1.0)
    return np.where(inside, 6.0 - 12.0 * phi, 0.0)


def interpolate_property(phi, v0, v1):
    return v0 + smoothstep(phi) * (v1 - v0)


# -- double well and its splitting ---------------------------------------------


def double_well(phi):
    return 0.25 * phi**2 * (1.0 - phi) ** 2


def double_well_prime(phi):
    return phi**3 - 1.5 * phi**2 + 0.5 * phi


def double_well_prime_expansive(phi):
    """Part of the well derivative that is taken from the previous time level."""
    return phi**3 - 1.5 * phi**2 - 0.25 * phi


def double_well_prime_contractive(phi):
    """Linear part of the well derivative, taken implicitly."""
    return 0.75 * phi


def cutoff(phi):
    return np.clip(phi, 0.0, 1.0)


def mobility(phi, floor=1e-16):
    return floor + 0.5 * phi**2 * (1.0 - phi) ** 2


def source_phi(phi, proliferation=5.0):
    c = cutoff(phi)
    return proliferation * c * (1.0 - c)


# -- tensors in component form ----------------------------------------------------


def to_components(tensor):
    tensor = np.asarray(tensor, dtype=float)
    return np.stack([tensor[..., 0, 0], tensor[..., 1, 1], 0.5 * (tensor[..., 0, 1] + tensor[..., 1, 0])], axis=-1)


def from_components(comp):
    comp = np.asarray(comp, dtype=float)
    out = np.empty(comp.shape[:-1] + (2, 2))
    out[..., 0, 0] = comp[..., 0]
    out[..., 1, 1] = comp[..., 1]
    out[..., 0, 1] = out[..., 1, 0] = comp[..., 2]
    return out


def ddot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + 2.0 * a[..., 2] * b[..., 2]


def isotropic_apply(lam, G, eps):
    """``lam tr(eps) I + 2 G eps`` in component form, broadcasting lam and G."""
    lam = np.asarray(lam)[..., None]
    G = np.asarray(G)[..., None]
    tr = (eps[..., 0] + eps[..., 1])[..., None]
    return lam * tr * np.array([1.0, 1.0, 0.0]) + 2.0 * G * eps


@dataclass(frozen=True)
class MaterialTable:
    kappa0: float = 0.5
    kappa1: float = 5.0
    M0: float = 0.5
    M1: float = 1.0
    alpha0: float = 0.5
    alpha1: float = 1.0
    E0: float = 2.8
    E1: float = 1.4
    nu0: float = 0.4
    nu1: float = 0.2
    gamma: float = 1e-4
    Cv_scale: float = 1e-16
    mobility_floor: float = 1e-16
    eigenstrain_coeff: float = 0.3
    proliferation: float = 5.0
    source_theta: float = 0.0
    source_u: tuple[float, float] = (0.0, 0.0)
    # a constant mobility replaces the degenerate law when set
    mobility_constant: float | None = None

    def __post_init__(self):
        positive = ("kappa0", "kappa1", "M0", "M1", "E0", "E1", "gamma")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("nu0", "nu1"):
            if not 0.0 < getattr(self, name) < 0.5:
                raise ValueError(f"{name} must lie in (0, 0.5)")
        if self.Cv_scale < 0 or self.mobility_floor <= 0:
            raise ValueError("Cv_scale must be >= 0 and mobility_floor > 0")
        if self.mobility_constant is not None and not self.mobility_constant > 0:
            raise ValueError("mobility_constant must be positive")
        object.__setattr__(self, "source_u", tuple(float(s) for s in self.source_u))

    def constant_coefficient_variant(self, mobility=1.0, kappa=1.0, alpha=0.5, M=0.5) -> "MaterialTable":
        """Coefficients frozen to constants, elasticity fixed to the healthy-tissue tensor."""
        return replace(
            self,
            kappa0=kappa,
            kappa1=kappa,
            M0=M,
            M1=M,
            alpha0=alpha,
            alpha1=alpha,
            E1=self.E0,
            nu1=self.nu0,
            mobility_constant=mobility,
        )

    @property
    def is_constant_coefficient(self) -> bool:
        return (
            self.mobility_constant is not None
            and self.kappa0 == self.kappa1
            and self.M0 == self.M1
            and self.alpha0 == self.alpha1
            and self.E0 == self.E1
            and self.nu0 == self.nu1
        )

    def as_dict(self) -> dict:
        return asdict(self)

    # endpoint moduli
    @property
    def moduli0(self) -> ElasticModuli:
        return lame_from_young_poisson(self.E0, self.nu0)

    @property
    def moduli1(self) -> ElasticModuli:
        return lame_from_young_poisson(self.E1, self.nu1)

    # scalar laws and their phi-derivatives
    def kappa(self, phi):
        return interpolate_property(phi, self.kappa0, self.kappa1)

    def M(self, phi):
        return interpolate_property(phi, self.M0, self.M1)

    def M_prime(self, phi):
        return smoothstep_prime(phi) * (self.M1 - self.M0)

    def M_second(self, phi):
        return smoothstep_second(phi) * (self.M1 - self.M0)

    def alpha(self, phi):
        return interpolate_property(phi, self.alpha0, self.alpha1)

    def alpha_prime(self, phi):
        return smoothstep_prime(phi) * (self.alpha1 - self.alpha0)

    def alpha_second(self, phi):
        return smoothstep_second(phi) * (self.alpha1 - self.alpha0)

    def mobility(self, phi):
        if self.mobility_constant is not None:
            return np.full_like(np.asarray(phi, dtype=float), self.mobility_constant)
        return mobility(phi, self.mobility_floor)

    def source_phi(self, phi):
        return source_phi(phi, self.proliferation)

    # elasticity: lam(phi), G(phi) and derivatives
    def lame(self, phi):
        G0, l0 = self.moduli0
        G1, l1 = self.moduli1
        s = smoothstep(phi)
        return l0 + s * (l1 - l0), G0 + s * (G1 - G0)

    def lame_prime(self, phi):
        G0, l0 = self.moduli0
        G1, l1 = self.moduli1
        s = smoothstep_prime(phi)
        return s * (l1 - l0), s * (G1 - G0)

    def lame_second(self, phi):
        G0, l0 = self.moduli0
        G1, l1 = self.moduli1
        s = smoothstep_second(phi)
        return s * (l1 - l0), s * (G1 - G0)

    def eigenstrain(self, phi):
        """Stress-free strain ``coeff * phi * I`` in component form."""
        c = self.eigenstrain_coeff * np.asarray(phi, dtype=float)
        return np.stack([c, c, np.zeros_like(c)], axis=-1)

    def eigenstrain_prime(self, phi):
        c = np.full(np.shape(phi), self.eigenstrain_coeff)
        return np.stack([c, c, np.zeros_like(c)], axis=-1)

    def voigt_matrix(self, phi) -> np.ndarray:
        """3x3 plane-strain Voigt matrix (engineering shear) at a scalar phi."""
        lam, G = self.lame(phi)
        lam = float(lam)
        G = float(G)
        return np.array([[lam + 2 * G, lam, 0.0], [lam, lam + 2 * G, 0.0], [0.0, 0.0, G]])

    def apply_elasticity_tensor(self, phi, strain):
        """Stress ``C(phi) strain`` for full ``(..., 2, 2)`` strain tensors."""
        lam, G = self.lame(phi)
        return from_components(isotropic_apply(lam, G, to_components(strain)))

    def elasticity_tensor_phi_derivative(self, phi, strain):
        lam, G = self.lame_prime(phi)
        return from_components(isotropic_apply(lam, G, to_components(strain)))


DEFAULT_MATERIAL = MaterialTable()
