import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chbiot.material import (
    MaterialTable,
    cutoff,
    double_well,
    double_well_prime,
    double_well_prime_contractive,
    double_well_prime_expansive,
    from_components,
    interpolate_property,
    lame_from_young_poisson,
    mobility,
    smoothstep,
    smoothstep_prime,
    source_phi,
    to_components,
)

MAT = MaterialTable()


@pytest.mark.parametrize("phi, expected", [(0.0, 0.0), (0.5, 0.5), (1.3, 1.0), (-0.4, 0.0), (1.0, 1.0)])
def test_smoothstep(phi, expected):
    assert smoothstep(phi) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("phi, expected", [(0.0, 0.5), (1.0, 5.0), (0.5, 2.75)])
def test_interpolated_permeability(phi, expected):
    assert interpolate_property(phi, 0.5, 5.0) == pytest.approx(expected)
    assert MAT.kappa(phi) == pytest.approx(expected)


@pytest.mark.parametrize(
    "E, nu, G, lam",
    [(2.8, 0.4, 1.0, 4.0), (1.4, 0.2, 0.583333333333, 0.388888888889), (1.0, 0.0, 0.5, 0.0)],
)
def test_lame_from_young_poisson(E, nu, G, lam):
    mod = lame_from_young_poisson(E, nu)
    assert mod.G == pytest.approx(G, rel=1e-11)
    assert mod.lam == pytest.approx(lam, rel=1e-11, abs=1e-15)


@pytest.mark.parametrize("E, nu", [(1.0, 0.5), (1.0, -0.1), (0.0, 0.3)])
def test_lame_rejects_invalid(E, nu):
    with pytest.raises(ValueError):
        lame_from_young_poisson(E, nu)


def test_elasticity_tensor_examples():
    zero = np.zeros((2, 2))
    np.testing.assert_array_equal(MAT.apply_elasticity_tensor(0.3, zero), zero)
    sig = MAT.apply_elasticity_tensor(1.0, 0.3 * np.eye(2))
    np.testing.assert_allclose(sig, 0.583333333333 * np.eye(2), rtol=1e-10)
    sig = MAT.apply_elasticity_tensor(0.0, np.diag([1.0, 0.0]))
    np.testing.assert_allclose(sig, np.diag([6.0, 4.0]), atol=1e-14)


def test_elasticity_tensor_matches_voigt_matrix(rng):
    for phi in (0.0, 0.37, 1.0):
        eps = rng.normal(size=(2, 2))
        eps = 0.5 * (eps + eps.T)
        voigt = MAT.voigt_matrix(phi) @ np.array([eps[0, 0], eps[1, 1], 2 * eps[0, 1]])
        sig = MAT.apply_elasticity_tensor(phi, eps)
        np.testing.assert_allclose([sig[0, 0], sig[1, 1], sig[0, 1]], voigt, rtol=1e-13)


def test_elasticity_tensor_derivative():
    eye = np.eye(2)
    np.testing.assert_array_equal(MAT.elasticity_tensor_phi_derivative(-0.5, eye), 0 * eye)
    np.testing.assert_allclose(MAT.elasticity_tensor_phi_derivative(1.0, eye), 0 * eye, atol=1e-15)
    diff = MAT.apply_elasticity_tensor(1.0, eye) - MAT.apply_elasticity_tensor(0.0, eye)
    np.testing.assert_allclose(MAT.elasticity_tensor_phi_derivative(0.5, eye), 1.5 * diff, rtol=1e-13)


def test_double_well_examples():
    assert double_well(0.0) == 0 and double_well_prime_expansive(0.0) == 0 and double_well_prime_contractive(0.0) == 0
    assert double_well_prime_expansive(1.0) == pytest.approx(-0.75)
    assert double_well_prime_contractive(1.0) == pytest.approx(0.75)
    assert double_well_prime(2.0) == pytest.approx(3.0)


def test_splitting_identity(rng):
    phi = rng.uniform(-1.0, 2.0, 1000)
    exact = 0.5 * phi * (1 - phi) ** 2 - 0.5 * phi**2 * (1 - phi)
    err = double_well_prime_expansive(phi) + double_well_prime_contractive(phi) - exact
    assert np.max(np.abs(err)) <= 1e-12


def test_contractive_part_is_convex_and_expansive_part_concave_on_unit_interval():
    phi = np.linspace(0.0, 1.0, 201)
    # derivative of the implicit part is positive; derivative of the explicit part is non-positive on [0, 1]
    dexp = np.gradient(double_well_prime_expansive(phi), phi)
    assert np.all(dexp <= 1e-2)
    assert np.all(np.diff(double_well_prime_contractive(phi)) > 0)


@pytest.mark.parametrize("phi, expected", [(0.0, 1e-16), (0.5, 1e-16 + 0.03125), (1.0, 1e-16)])
def test_mobility(phi, expected):
    assert mobility(phi) == pytest.approx(expected, rel=1e-15, abs=0)


@pytest.mark.parametrize("phi, expected", [(-0.2, 0.0), (0.4, 0.4), (1.3, 1.0)])
def test_cutoff(phi, expected):
    assert cutoff(phi) == expected


@pytest.mark.parametrize("phi, expected", [(0.5, 1.25), (0.0, 0.0), (1.2, 0.0), (-0.3, 0.0)])
def test_source(phi, expected):
    assert source_phi(phi) == pytest.approx(expected)
    assert MAT.source_phi(phi) == pytest.approx(expected)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.5, 1.5), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_component_roundtrip_and_major_symmetry(phi, a, b, c):
    eps = np.array([[a, c], [c, b]])
    np.testing.assert_array_equal(from_components(to_components(eps)), eps)
    other = np.array([[b, a], [a, c]])
    lhs = np.sum(MAT.apply_elasticity_tensor(phi, eps) * other)
    rhs = np.sum(eps * MAT.apply_elasticity_tensor(phi, other))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0))
def test_property_bounds(phi):
    assert 0.5 <= MAT.kappa(phi) <= 5.0
    assert 0.5 <= MAT.M(phi) <= 1.0
    assert 0.5 <= MAT.alpha(phi) <= 1.0
    assert 0.0 <= smoothstep(phi) <= 1.0
    assert smoothstep_prime(phi) >= 0.0


def test_derivatives_against_finite_differences():
    phi = np.linspace(0.05, 0.95, 11)
    d = 1e-6
    for f, fp in [(MAT.M, MAT.M_prime), (MAT.alpha, MAT.alpha_prime), (MAT.M_prime, MAT.M_second)]:
        np.testing.assert_allclose(fp(phi), (f(phi + d) - f(phi - d)) / (2 * d), rtol=1e-6, atol=1e-8)
    lam_fd = (MAT.lame(phi + d)[0] - MAT.lame(phi - d)[0]) / (2 * d)
    np.testing.assert_allclose(MAT.lame_prime(phi)[0], lam_fd, rtol=1e-6, atol=1e-8)


def test_constant_coefficient_variant():
    cc = MAT.constant_coefficient_variant()
    assert cc.is_constant_coefficient and not MAT.is_constant_coefficient
    phi = np.linspace(0, 1, 5)
    np.testing.assert_allclose(cc.kappa(phi), 1.0)
    np.testing.assert_allclose(cc.mobility(phi), 1.0)
    np.testing.assert_allclose(cc.alpha(phi), 0.5)
    np.testing.assert_allclose(cc.M(phi), 0.5)
    np.testing.assert_allclose(cc.lame(phi)[1], 1.0)
    np.testing.assert_allclose(cc.lame(phi)[0], 4.0)


def test_table_defaults():
    d = MAT.as_dict()
    expected = dict(kappa0=0.5, kappa1=5.0, M0=0.5, M1=1.0, alpha0=0.5, alpha1=1.0, E0=2.8, E1=1.4, nu0=0.4, nu1=0.2)
    for key, value in expected.items():
        assert d[key] == value
    assert MAT.gamma == 1e-4
    assert MAT.proliferation == 5.0
    np.testing.assert_allclose(MAT.eigenstrain(1.0), [0.3, 0.3, 0.0])
