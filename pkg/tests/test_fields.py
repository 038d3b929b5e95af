import os

import numpy as np
import pytest

from damped_sns.fields import (
    NUMERICAL_TOL,
    GridSpec,
    PhysicalVelocity,
    SpectralVelocity,
    compute_norms,
    forward_transform,
    grad_magnitude_power_field,
    inverse_transform,
    leray_project,
    random_solenoidal,
    read_snapshot,
    regrid,
    write_snapshot,
)
from damped_sns.integrator import shear_field


@pytest.fixture
def grid() -> GridSpec:
    return GridSpec(8)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12)


@pytest.mark.fields
@pytest.mark.parametrize("n", [2, 5, 7])
def test_grid_rejects_bad_sizes(n: int) -> None:
    with pytest.raises(ValueError):
        GridSpec(n)


@pytest.mark.fields
def test_grid_retained_set(grid: GridSpec) -> None:
    m = grid.wavevector_indices
    retained = m[:, grid.retained]
    assert not grid.retained[0, 0, 0]
    assert np.all(np.abs(retained) < 4)
    assert np.all(np.sum(retained**2, axis=0) <= 7)
    assert grid.n_modes == len(grid.galerkin_modes)


@pytest.mark.fields
def test_galerkin_modes_ordered(grid: GridSpec) -> None:
    radii = np.sum(grid.galerkin_modes**2, axis=1)
    assert np.all(np.diff(radii) >= 0)
    assert radii[0] == 1


@pytest.mark.fields
def test_spectral_velocity_shape_checked(grid: GridSpec) -> None:
    with pytest.raises(ValueError):
        SpectralVelocity(np.zeros((3, 4, 4, 4)), grid)


@pytest.mark.fields
def test_physical_velocity_rejects_nan(grid: GridSpec) -> None:
    samples = np.zeros((3,) + grid.shape)
    samples[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        PhysicalVelocity(samples, grid)


@pytest.mark.fields
def test_transforms_invert(grid: GridSpec, rng: np.random.Generator) -> None:
    p = PhysicalVelocity(rng.standard_normal((3,) + grid.shape), grid)
    back = inverse_transform(forward_transform(p))
    assert np.allclose(back.samples, p.samples, rtol=0, atol=1e-12)


@pytest.mark.fields
def test_leray_projection(grid: GridSpec, rng: np.random.Generator) -> None:
    p = PhysicalVelocity(rng.standard_normal((3,) + grid.shape), grid)
    raw = forward_transform(p)
    u = leray_project(raw)
    assert not raw.is_velocity(NUMERICAL_TOL)
    assert u.is_velocity(NUMERICAL_TOL)
    twice = leray_project(u)
    assert np.allclose(twice.coefficients, u.coefficients, rtol=0, atol=1e-14)
    # orthogonal projection: (P w, w - P w) = 0
    assert abs(u.inner(raw - u)) <= 1e-10 * raw.h_norm_sq()


@pytest.mark.fields
def test_parseval(grid: GridSpec, rng: np.random.Generator) -> None:
    u = random_solenoidal(grid, rng)
    p = inverse_transform(u)
    energy = p.integrate(np.sum(p.samples**2, axis=0))
    assert energy == pytest.approx(u.h_norm_sq(), rel=1e-10)


@pytest.mark.fields
def test_norms_and_poincare(grid: GridSpec, rng: np.random.Generator) -> None:
    u = random_solenoidal(grid, rng, v_norm_sq=2.0)
    norms = compute_norms(u, 3.0)
    assert norms.v_norm_sq == pytest.approx(2.0, rel=1e-12)
    assert norms.poincare_holds(grid)
    # |grad u|_2^2 equals ||u||^2 for resolved fields
    assert norms.grad_h_norm_sq == pytest.approx(norms.v_norm_sq, rel=1e-10)
    with pytest.raises(ValueError):
        compute_norms(u, 0.5)


@pytest.mark.fields
def test_shear_field_norms(grid: GridSpec) -> None:
    u = shear_field(grid, 2.0)
    assert u.is_velocity()
    # |A sin(y)|^2 integrated over (2 pi)^3
    assert u.h_norm_sq() == pytest.approx(4.0 * np.pi**3 * 4.0, rel=1e-12)


@pytest.mark.fields
def test_regrid_prolong_restrict(rng: np.random.Generator) -> None:
    coarse, fine = GridSpec(4), GridSpec(8)
    u = random_solenoidal(coarse, rng)
    back = regrid(regrid(u, fine), coarse)
    assert np.array_equal(back.coefficients, u.coefficients)
    assert regrid(u, fine).h_norm_sq() == pytest.approx(u.h_norm_sq())


@pytest.mark.fields
def test_regrid_restriction_is_projection(rng: np.random.Generator) -> None:
    coarse, fine = GridSpec(4), GridSpec(8)
    u = random_solenoidal(fine, rng)
    restricted = regrid(u, coarse)
    assert restricted.is_velocity()
    assert restricted.h_norm_sq() < u.h_norm_sq()


@pytest.mark.fields
def test_regrid_other_box(rng: np.random.Generator) -> None:
    u = random_solenoidal(GridSpec(4), rng)
    with pytest.raises(ValueError):
        regrid(u, GridSpec(8, box_length=1.0))


@pytest.mark.fields
def test_snapshot(
    tmp_path: str, grid: GridSpec, rng: np.random.Generator
) -> None:
    u = random_solenoidal(grid, rng)
    path = write_snapshot(u, os.path.join(tmp_path, "u.snap"))
    v = read_snapshot(path)
    assert v.grid == grid
    assert np.array_equal(v.coefficients, u.coefficients)


@pytest.mark.fields
def test_snapshot_bad_magic(tmp_path: str) -> None:
    path = os.path.join(tmp_path, "bad.snap")
    with open(path, "wb") as snapshot:
        snapshot.write(b"NOPE" + bytes(64))
    with pytest.raises(ValueError):
        read_snapshot(path)


@pytest.mark.fields
def test_snapshot_truncated(tmp_path: str, grid: GridSpec) -> None:
    path = write_snapshot(
        shear_field(grid, 1.0), os.path.join(tmp_path, "u.snap")
    )
    with open(path, "rb") as snapshot:
        raw = snapshot.read()
    with open(path, "wb") as snapshot:
        snapshot.write(raw[:-8])
    with pytest.raises(ValueError):
        read_snapshot(path)


@pytest.mark.fields
def test_shear_field_power_dissipation(grid: GridSpec) -> None:
    u = shear_field(grid, 1.0)
    # |grad |u|^2|_2^2 = integral of sin^2(2y)
    power = grad_magnitude_power_field(inverse_transform(u), 3.0)
    assert power == pytest.approx((2.0 * np.pi) ** 3 / 2.0, rel=1e-10)


@pytest.mark.fields
def test_shear_field_lp_norm(grid: GridSpec) -> None:
    norms = compute_norms(shear_field(grid, 1.0), 3.0)
    assert norms.lp_norm == pytest.approx(
        (2.0 * np.pi) ** 3 * 3.0 / 8.0, rel=1e-10
    )
