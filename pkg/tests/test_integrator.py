import math

import numpy as np
import pytest

from damped_sns.diagnostics import EnergyLedger, TwinLedger
from damped_sns.fields import GridSpec, SpectralVelocity, random_solenoidal
from damped_sns.gates import GateViolation
from damped_sns.integrator import (
    DIFFUSION,
    RESCALED,
    SEMI_IMPLICIT,
    TAMED,
    BlowUpError,
    ConstantForcing,
    InitialData,
    SimConfig,
    SimState,
    integrate,
    record_trajectory,
    shear_field,
    step,
    step_diffusion_only,
    twin_integrate,
)
from damped_sns.noise import (
    ADDITIVE,
    MULTIPLICATIVE,
    NoiseModel,
    RandomStream,
    WienerIncrement,
    sample_increment,
)
from damped_sns.operators import DampingParams


def make_config(grid: GridSpec = GridSpec(8), **changes) -> SimConfig:
    settings = dict(
        grid=grid,
        damping=DampingParams(1.0, 3.0),
        mu=1.0,
        noise=NoiseModel(grid, sigma=0.1, n_pairs=3),
        dt=0.01,
        t_end=0.1,
    )
    settings.update(changes)
    return SimConfig(**settings)


@pytest.mark.integrator
@pytest.mark.parametrize(
    "changes",
    [
        {"dt": 0.03},
        {"dt": 0.2},
        {"mu": 0.0},
        {"t_end": -1.0},
        {"epsilon": 2.0},
        {"seed": -1},
        {"scheme": "explicit"},
        {"noise": NoiseModel(GridSpec(4), n_pairs=3)},
    ],
)
def test_invalid_config(changes: dict) -> None:
    with pytest.raises(ValueError):
        make_config(**changes)


@pytest.mark.integrator
def test_strong_mode_gate() -> None:
    with pytest.raises(GateViolation):
        make_config(damping=DampingParams(0.4, 3.0), strong_mode=True)
    assert make_config(damping=DampingParams(0.5, 3.0), strong_mode=True)


@pytest.mark.integrator
def test_steps_and_stability_ratio() -> None:
    cfg = make_config(dt=1e-3, t_end=1.0, mu=0.5)
    assert cfg.n_steps == 1000
    # largest retained |kappa|^2 on 8^3 is 6
    assert cfg.stability_ratio == pytest.approx(1e-3 * 0.5 * 6)


@pytest.mark.integrator
def test_initial_presets() -> None:
    grid = GridSpec(8)
    assert InitialData().build(grid).h_norm_sq() == 0.0
    smooth = InitialData("random-smooth", v_norm_sq=2.0, seed=4).build(grid)
    assert smooth.v_norm_sq() == pytest.approx(2.0)
    again = InitialData("random-smooth", v_norm_sq=2.0, seed=4).build(grid)
    assert np.array_equal(smooth.coefficients, again.coefficients)
    with pytest.raises(ValueError):
        InitialData("vortex")
    with pytest.raises(ValueError):
        InitialData("snapshot")


@pytest.mark.integrator
def test_zero_stays_zero_without_noise() -> None:
    grid = GridSpec(8)
    cfg = make_config(noise=NoiseModel(grid, sigma=0.0, n_pairs=3))
    ledger, summary = record_trajectory(cfg, RandomStream(1))
    assert len(ledger) == cfg.n_steps + 1
    assert summary.final_state.u.h_norm_sq() == 0.0
    assert np.all(ledger.column("h2") == 0.0)


@pytest.mark.integrator
def test_zero_time_run() -> None:
    ledger, summary = record_trajectory(
        make_config(t_end=0.0, initial=InitialData("shear", 0.5)),
        RandomStream(0),
    )
    assert len(ledger) == 1
    assert ledger[0].t == 0.0
    assert summary.n_steps == 0
    assert ledger[0].h_norm_sq == pytest.approx(4.0 * math.pi**3 * 0.25)


@pytest.mark.integrator
def test_integrate_is_reproducible() -> None:
    cfg = make_config(initial=InitialData("random-smooth", seed=2))
    first = integrate(cfg, RandomStream(7, 1))
    second = integrate(cfg, RandomStream(7, 1))
    other = integrate(cfg, RandomStream(8, 1))
    u = first.final_state.u.coefficients
    assert np.array_equal(u, second.final_state.u.coefficients)
    assert not np.array_equal(u, other.final_state.u.coefficients)
    assert first.final_state.u.is_velocity()
    assert first.final_state.t == pytest.approx(0.1)


@pytest.mark.integrator
def test_ledger_sink_receives_every_step() -> None:
    cfg = make_config()
    ledger = EnergyLedger()
    integrate(cfg, RandomStream(3), ledger.append)
    assert len(ledger) == 11
    assert np.allclose(ledger.times, np.linspace(0.0, 0.1, 11))


def _blow_up_config(scheme: str) -> SimConfig:
    grid = GridSpec(8)
    return make_config(
        noise=NoiseModel(grid, sigma=0.0, n_pairs=3),
        dt=1.0,
        t_end=20.0,
        scheme=scheme,
        initial=InitialData("shear", 10.0),
    )


@pytest.mark.integrator
def test_blow_up_raises() -> None:
    with np.errstate(all="ignore"):
        with pytest.raises(BlowUpError) as err:
            integrate(_blow_up_config(SEMI_IMPLICIT), RandomStream(0))
    assert err.value.t > 0
    assert np.all(np.isfinite(err.value.state.u.coefficients))


@pytest.mark.integrator
def test_blow_up_is_recorded() -> None:
    with np.errstate(all="ignore"):
        ledger, summary = record_trajectory(
            _blow_up_config(SEMI_IMPLICIT), RandomStream(0)
        )
    assert summary.blew_up
    assert summary.blow_up_time is not None
    assert len(ledger) == summary.final_state.step_index + 1


@pytest.mark.integrator
def test_tamed_scheme_stays_bounded() -> None:
    ledger, summary = record_trajectory(
        _blow_up_config(TAMED), RandomStream(0)
    )
    assert not summary.blew_up
    h = ledger.column("h2")
    assert np.all(np.diff(h) <= 1e-9 * h[0])


@pytest.mark.integrator
def test_rescaled_needs_epsilon() -> None:
    cfg = make_config()
    for mode in (RESCALED, DIFFUSION):
        with pytest.raises(ValueError):
            integrate(cfg, RandomStream(0), mode=mode)


@pytest.mark.integrator
def test_rescaled_with_unit_epsilon_is_plain() -> None:
    cfg = make_config(epsilon=1.0, initial=InitialData("shear", 1.0))
    plain = integrate(cfg, RandomStream(2)).final_state.u
    rescaled = integrate(cfg, RandomStream(2), mode=RESCALED).final_state.u
    assert np.array_equal(plain.coefficients, rescaled.coefficients)


@pytest.mark.integrator
def test_diffusion_only_without_noise_is_frozen() -> None:
    grid = GridSpec(8)
    cfg = make_config(
        noise=NoiseModel(grid, sigma=0.0, n_pairs=3),
        epsilon=0.1,
        initial=InitialData("shear", 2.0),
    )
    final = integrate(cfg, RandomStream(0), mode=DIFFUSION).final_state.u
    assert np.allclose(final.coefficients, shear_field(grid, 2.0).coefficients)


@pytest.mark.integrator
def test_constant_forcing_moves_zero_state() -> None:
    grid = GridSpec(8)
    force = ConstantForcing(shear_field(grid, 1.0))
    cfg = make_config(
        noise=NoiseModel(grid, sigma=0.0, n_pairs=3), forcing=force
    )
    final = integrate(cfg, RandomStream(0)).final_state.u
    assert final.h_norm_sq() > 0
    assert final.inner(force(0.0)) > 0
    coarse = cfg.with_grid(GridSpec(4))
    assert coarse.forcing(0.0).grid == GridSpec(4)
    assert coarse.noise.grid == GridSpec(4)


@pytest.mark.integrator
def test_twin_identical_copies() -> None:
    cfg = make_config()
    u = random_solenoidal(cfg.grid, np.random.default_rng(1), v_norm_sq=1.0)
    ledger = TwinLedger()
    final = twin_integrate(cfg, RandomStream(4), u, u, 1.0, ledger.append)
    assert final.difference_sq() == 0.0
    assert len(ledger) == cfg.n_steps + 1
    assert np.all(ledger.column("weighted") == 0.0)
    assert np.all(np.diff(ledger.column("r")) >= 0)


@pytest.mark.integrator
def test_twin_weight() -> None:
    cfg = make_config()
    rng = np.random.default_rng(2)
    u1 = random_solenoidal(cfg.grid, rng, v_norm_sq=1.0)
    u2 = SpectralVelocity.zeros(cfg.grid)
    ledger = TwinLedger()
    twin_integrate(cfg, RandomStream(4), u1, u2, 2.0, ledger.append)
    first = ledger[0]
    assert first.r_accum == 0.0
    assert first.weighted == first.difference_sq
    for row in ledger:
        assert row.weighted == pytest.approx(
            math.exp(-row.r_accum) * row.difference_sq
        )
    with pytest.raises(ValueError):
        twin_integrate(cfg, RandomStream(4), u1, u2, -1.0)


@pytest.mark.integrator
def test_energy_does_not_grow_without_noise() -> None:
    cfg = make_config(noise=NoiseModel(GridSpec(8), sigma=0.0, n_pairs=3))
    u = random_solenoidal(cfg.grid, np.random.default_rng(3), v_norm_sq=1.0)
    state = SimState(0.0, u)
    still = WienerIncrement(np.zeros(cfg.noise.n_coordinates), cfg.dt)
    energies = [u.h_norm_sq()]
    for _ in range(cfg.n_steps):
        state = step(state, cfg, still)
        energies.append(state.u.h_norm_sq())
    assert np.all(np.diff(energies) <= 0.0)


@pytest.mark.integrator
def test_additive_noise_cancels_in_twin_difference() -> None:
    grid = GridSpec(8)
    rng = np.random.default_rng(5)
    u1 = SimState(0.0, random_solenoidal(grid, rng, v_norm_sq=1.0))
    u2 = SimState(0.0, u1.u.scaled(2.0))

    def gap(cfg: SimConfig, dW: WienerIncrement) -> np.ndarray:
        return (step(u1, cfg, dW).u - step(u2, cfg, dW).u).coefficients

    for kind, cancels in ((ADDITIVE, True), (MULTIPLICATIVE, False)):
        noise = NoiseModel(grid, kind, sigma=1.0, n_pairs=3)
        cfg = make_config(noise=noise)
        still = WienerIncrement(np.zeros(noise.n_coordinates), cfg.dt)
        dW = sample_increment(noise, cfg.dt, RandomStream(6), 0)
        same = np.allclose(gap(cfg, dW), gap(cfg, still), rtol=0, atol=1e-12)
        assert same is cancels


@pytest.mark.integrator
def test_diffusion_only_variance() -> None:
    grid = GridSpec(4)
    noise = NoiseModel(grid, sigma=1.0, n_pairs=3)
    cfg = make_config(grid, noise=noise, epsilon=0.25, dt=0.1, t_end=0.5)
    n_samples = 2000
    coordinates = []
    for k in range(n_samples):
        stream = RandomStream(8, k)
        state = SimState(0.0, SpectralVelocity.zeros(grid))
        for index in range(cfg.n_steps):
            dW = sample_increment(noise, cfg.dt, stream, index)
            state = step_diffusion_only(state, cfg, dW)
        coordinates.append(noise.field_to_coordinates(state.u))
    expected = cfg.epsilon * noise.amplitudes * cfg.t_end
    variance = np.var(coordinates, axis=0, ddof=1)
    # relative standard error of a Gaussian sample variance
    tolerance = 5.0 * expected * math.sqrt(2.0 / (n_samples - 1))
    assert np.all(np.abs(variance - expected) < tolerance)
