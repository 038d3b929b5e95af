from dataclasses import replace

import numpy as np
import pytest

from damped_sns.fields import GridSpec, SpectralVelocity, random_solenoidal
from damped_sns.integrator import InitialData, SimConfig, shear_field
from damped_sns.ldp import straight_path
from damped_sns.noise import NoiseModel, RandomStream
from damped_sns.operators import DampingParams
from damped_sns.properties import (
    PropertyResult,
    convolution_oracle,
    damping_calculus,
    direct_convection,
    noise_covariance,
    quadratic_program_rate,
    rate_function_properties,
    run_suite,
    shear_oracle,
    tail_monotonicity,
    taming_order,
    time_change,
)


def make_config(n: int = 8) -> SimConfig:
    grid = GridSpec(n)
    return SimConfig(
        grid=grid,
        damping=DampingParams(1.0, 3.0),
        mu=1.0,
        noise=NoiseModel(grid, sigma=0.1, n_pairs=3),
        dt=0.01,
        t_end=0.1,
        seed=2,
        initial=InitialData("random-smooth", seed=1),
    )


@pytest.mark.operators
def test_shear_oracle() -> None:
    results = shear_oracle(GridSpec(8))
    assert [r.name for r in results] == [
        "shear_recursion",
        "shear_exponential_decay",
    ]
    assert all(r.passed for r in results)


@pytest.mark.operators
@pytest.mark.parametrize("beta", [1.0, 3.0, 4.0])
def test_damping_calculus(beta: float) -> None:
    results = damping_calculus(
        DampingParams(1.0, beta), np.random.default_rng(0), 200
    )
    assert all(r.passed for r in results)
    names = {r.name for r in results}
    assert ("damping_local_lipschitz" in names) is (beta >= 2)


@pytest.mark.ldp
def test_rate_properties_fully_forced_grid() -> None:
    cfg = make_config(4)
    results = rate_function_properties(cfg, RandomStream(1).generator())
    by_name = {r.name: r for r in results}
    assert all(r.passed for r in results)
    assert by_name["rate_unreachable"].detail


@pytest.mark.integrator
def test_run_suite_passes() -> None:
    results = run_suite(make_config(), n_samples=3, n_steps=10)
    failed = [r.name for r in results if not r.passed]
    assert failed == []
    names = [r.name for r in results]
    assert len(names) == len(set(names)) == 29


@pytest.mark.integrator
def test_property_result_as_dict() -> None:
    result = PropertyResult("energy_balance", False, np.float64(0.5), 0.1)
    assert result.as_dict() == {
        "name": "energy_balance",
        "passed": False,
        "measured": 0.5,
        "tolerance": 0.1,
        "detail": "",
    }


@pytest.mark.operators
def test_direct_convection() -> None:
    grid = GridSpec(8)
    shear = direct_convection(shear_field(grid, 1.0))
    assert np.max(np.abs(shear)) == 0.0
    u = random_solenoidal(grid, np.random.default_rng(3))
    assert np.max(np.abs(direct_convection(u))) > 0
    result = convolution_oracle(grid.box_length, np.random.default_rng(4), 2)
    assert result.name == "convective_convolution"
    assert result.passed


@pytest.mark.ldp
def test_quadratic_program_rate_closed_form() -> None:
    grid = GridSpec(4)
    noise = NoiseModel(grid, sigma=0.5, n_pairs=3)
    c = np.random.default_rng(5).standard_normal(noise.n_coordinates)
    xi = SpectralVelocity.zeros(grid)
    times = np.linspace(0.0, 1.0, 6)
    path = straight_path(xi, noise.coordinates_to_field(c), times)
    closed = 0.5 * float(np.sum(c**2 / noise.amplitudes))
    assert quadratic_program_rate(path, noise, times) == pytest.approx(
        closed, rel=1e-10
    )


@pytest.mark.noise
def test_noise_covariance() -> None:
    cfg = make_config(4)
    results = noise_covariance(cfg.noise, 2000, 0.01, 3)
    assert [r.name for r in results] == ["noise_covariance", "increment_real"]
    assert all(r.passed for r in results)
    silent = noise_covariance(replace(cfg.noise, sigma=0.0), 1000, 0.1, 3)
    assert all(r.passed for r in silent)


@pytest.mark.integrator
def test_taming_order() -> None:
    result = taming_order(make_config(), np.random.default_rng(6), 3)
    assert result.name == "tamed_second_order"
    assert 0 < result.measured <= 1.0


@pytest.mark.integrator
def test_time_change() -> None:
    cfg = make_config(4)
    result = time_change(cfg, 40, 5, 1)
    assert result.passed
    assert "p-value" in result.detail
    silent = replace(cfg, noise=NoiseModel(cfg.grid, sigma=0.0, n_pairs=3))
    assert time_change(silent, 2, 5, 1).passed


@pytest.mark.ldp
def test_tail_monotonicity() -> None:
    results = tail_monotonicity(make_config(4), 20, 5, 1)
    assert [r.name for r in results] == [
        "tail_monotone_delta",
        "tail_monotone_threshold",
    ]
    assert all(r.measured == 0.0 for r in results)
