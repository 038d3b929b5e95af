import numpy as np
import pytest

from damped_sns.fields import (
    NUMERICAL_TOL,
    GridSpec,
    inverse_transform,
    random_solenoidal,
)
from damped_sns.integrator import shear_field
from damped_sns.operators import (
    DampingParams,
    convective_term,
    damping_apply,
    damping_jacobian,
    damping_jacobian_vectors,
    damping_local_lipschitz_check,
    damping_monotonicity_check,
    damping_projected,
    damping_vectors,
    stokes_apply,
    trilinear_form,
)


@pytest.fixture
def grid() -> GridSpec:
    return GridSpec(8)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(3)


@pytest.mark.operators
@pytest.mark.parametrize(
    "alpha, beta, ok",
    [(0.5, 3.0, True), (0.4, 3.0, False), (0.1, 4.0, True), (1.0, 2.0, False)],
)
def test_strong_mode_condition(alpha: float, beta: float, ok: bool) -> None:
    assert DampingParams(alpha, beta).strong_mode_ok() is ok


@pytest.mark.operators
@pytest.mark.parametrize("alpha, beta", [(0.0, 3.0), (1.0, 0.5)])
def test_damping_params_invalid(alpha: float, beta: float) -> None:
    with pytest.raises(ValueError):
        DampingParams(alpha, beta)


@pytest.mark.operators
def test_stokes(grid: GridSpec) -> None:
    u = shear_field(grid, 1.0)
    # sin(y) is an eigenfunction of -Laplacian with eigenvalue 1
    assert np.allclose(stokes_apply(u, 2.0).coefficients, 2.0 * u.coefficients)
    with pytest.raises(ValueError):
        stokes_apply(u, -1.0)


@pytest.mark.operators
def test_trilinear_identities(
    grid: GridSpec, rng: np.random.Generator
) -> None:
    for _ in range(5):
        u = random_solenoidal(grid, rng, v_norm_sq=1.0)
        v = random_solenoidal(grid, rng, v_norm_sq=1.0)
        w = random_solenoidal(grid, rng, v_norm_sq=1.0)
        scale = u.h_norm_sq() ** 0.5 * v.v_norm_sq() * w.v_norm_sq()
        assert abs(trilinear_form(u, v, v)) <= 1e-10 * max(scale, 1.0)
        antisymmetry = trilinear_form(u, w, v) + trilinear_form(u, v, w)
        assert abs(antisymmetry) <= 1e-10 * max(scale, 1.0)


@pytest.mark.operators
def test_convective_term(grid: GridSpec, rng: np.random.Generator) -> None:
    u = random_solenoidal(grid, rng, v_norm_sq=1.0)
    b = convective_term(u)
    assert b.is_velocity(NUMERICAL_TOL)
    assert abs(b.inner(u)) <= 1e-10
    # shear flows are steady solutions of the Euler nonlinearity
    assert convective_term(shear_field(grid, 1.0)).h_norm_sq() <= 1e-25


@pytest.mark.operators
def test_damping_values() -> None:
    d = DampingParams(1.0, 3.0)
    vectors = np.array([[1.0, 2.0, 2.0], [0.0, 0.0, 0.0]])
    expected = [[9.0, 18.0, 18.0], [0.0, 0.0, 0.0]]
    assert np.allclose(damping_vectors(vectors, d), expected)
    jacobians = damping_jacobian_vectors(vectors, d)
    assert np.array_equal(jacobians[1], np.zeros((3, 3)))


@pytest.mark.operators
def test_damping_jacobian_finite_difference(rng: np.random.Generator) -> None:
    d = DampingParams(0.7, 3.5)
    points = rng.standard_normal((50, 3))
    directions = rng.standard_normal((50, 3))
    h = 1e-6
    numeric = (
        damping_vectors(points + h * directions, d)
        - damping_vectors(points - h * directions, d)
    ) / (2 * h)
    analytic = np.einsum(
        "pij,pj->pi", damping_jacobian_vectors(points, d), directions
    )
    error = np.linalg.norm(numeric - analytic, axis=1)
    assert np.all(error <= 1e-6 * np.linalg.norm(analytic, axis=1))


@pytest.mark.operators
def test_damping_jacobian_field(
    grid: GridSpec, rng: np.random.Generator
) -> None:
    p = inverse_transform(random_solenoidal(grid, rng))
    jacobian = damping_jacobian(p, DampingParams(1.0, 3.0))
    assert jacobian.symmetric_defect() == 0.0
    assert jacobian.min_eigenvalue() >= 0.0
    assert damping_apply(p, DampingParams(1.0, 1.0)).samples == pytest.approx(
        p.samples
    )


@pytest.mark.operators
@pytest.mark.parametrize("beta", [1.0, 2.0, 3.0, 4.5])
def test_damping_monotone(beta: float, rng: np.random.Generator) -> None:
    u = 3.0 * rng.standard_normal((1000, 3))
    v = 3.0 * rng.standard_normal((1000, 3))
    values = damping_monotonicity_check(u, v, DampingParams(1.0, beta))
    assert np.min(values) >= -1e-12


@pytest.mark.operators
@pytest.mark.parametrize("beta", [2.0, 3.0, 4.0])
def test_damping_local_lipschitz(
    beta: float, rng: np.random.Generator
) -> None:
    u = rng.standard_normal((1000, 3))
    v = rng.standard_normal((1000, 3))
    lhs, rhs = damping_local_lipschitz_check(u, v, DampingParams(1.0, beta))
    assert np.all(lhs <= rhs * (1 + 1e-12) + 1e-15)


@pytest.mark.operators
def test_damping_local_lipschitz_needs_beta_two() -> None:
    with pytest.raises(ValueError):
        damping_local_lipschitz_check(
            np.ones(3), np.zeros(3), DampingParams(1.0, 1.5)
        )


@pytest.mark.operators
def test_damping_projected(grid: GridSpec, rng: np.random.Generator) -> None:
    u = random_solenoidal(grid, rng, v_norm_sq=4.0)
    d = DampingParams(1.0, 3.0)
    plain = damping_projected(u, d)
    assert plain.is_velocity(NUMERICAL_TOL)
    # (P g(u), u) = int alpha |u|^(beta+1)
    p = inverse_transform(u)
    lp = p.integrate(p.magnitude() ** 4)
    assert plain.inner(u) == pytest.approx(lp, rel=1e-10)
    barely = damping_projected(u, d, taming_dt=1e-12)
    assert np.allclose(barely.coefficients, plain.coefficients, atol=1e-12)
    tamed = damping_projected(u, d, taming_dt=1.0)
    assert tamed.inner(u) < plain.inner(u)
