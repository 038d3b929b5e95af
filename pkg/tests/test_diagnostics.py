import math
import os

import numpy as np
import pytest

from damped_sns.diagnostics import (
    DIFFUSION_CRITERIA,
    MIN_ENSEMBLE,
    EnergyLedger,
    IncompleteTrajectoryError,
    LedgerRow,
    TwinLedger,
    TwinRow,
    bootstrap_mean,
    detect_exit,
    energy_ball_functional,
    gradient_bound_check,
    ledger_row,
    moment_estimates,
    step_energy_residual,
    weighted_twin_difference,
)
from damped_sns.fields import GridSpec, random_solenoidal
from damped_sns.gates import GateViolation
from damped_sns.integrator import SimConfig, SimState, shear_field, step
from damped_sns.noise import NoiseModel, RandomStream, sample_increment
from damped_sns.operators import DampingParams


def make_ledger(times, h2, v2=None, lp=None) -> EnergyLedger:
    v2 = v2 if v2 is not None else np.zeros(len(times))
    lp = lp if lp is not None else np.zeros(len(times))
    rows = [
        LedgerRow(t, h, v, p, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
        for t, h, v, p in zip(times, h2, v2, lp)
    ]
    return EnergyLedger(rows)


def make_twin(weighted) -> TwinLedger:
    return TwinLedger(
        [TwinRow(float(t), 0.0, w, w) for t, w in enumerate(weighted)]
    )


def make_config(**changes) -> SimConfig:
    grid = GridSpec(8)
    settings = dict(
        grid=grid,
        damping=DampingParams(1.0, 3.0),
        mu=1.0,
        noise=NoiseModel(grid, sigma=0.0, n_pairs=3),
        dt=1e-3,
        t_end=1.0,
    )
    settings.update(changes)
    return SimConfig(**settings)


@pytest.mark.diagnostics
def test_ledger_time_must_increase() -> None:
    with pytest.raises(ValueError):
        make_ledger([0.0, 0.0], [1.0, 1.0])


@pytest.mark.diagnostics
def test_ledger_rejects_negative_norms() -> None:
    with pytest.raises(ValueError):
        make_ledger([0.0], [-1.0])
    with pytest.raises(ValueError):
        TwinLedger([TwinRow(0.0, -1.0, 0.0, 0.0)])


@pytest.mark.diagnostics
def test_ledger_csv(tmp_path: str) -> None:
    ledger = make_ledger([0.0, 0.5, 1.0], [1.0 / 3.0, 2.0, 3.0])
    path = ledger.to_csv(os.path.join(tmp_path, "ledger.csv"))
    with open(path) as csv_file:
        assert csv_file.readline().strip() == (
            "t,h2,v2,lp,g_h2,g_v2,mixed,sqrtpow,hs2,stoch_acc"
        )
    back = EnergyLedger.from_csv(path)
    assert np.array_equal(back.column("h2"), ledger.column("h2"))
    with pytest.raises(ValueError):
        TwinLedger.from_csv(path)


@pytest.mark.diagnostics
def test_ledger_row_mixed_dissipation_of_shear() -> None:
    cfg = make_config()
    row = ledger_row(SimState(0.0, shear_field(cfg.grid, 1.0)), cfg)
    # integral of sin^2 y cos^2 y
    assert row.mixed_dissipation == pytest.approx(
        (2.0 * math.pi) ** 3 / 8.0, rel=1e-10
    )


@pytest.mark.diagnostics
def test_energy_residual_is_second_order() -> None:
    u = random_solenoidal(GridSpec(8), np.random.default_rng(5), v_norm_sq=1.0)
    residuals = []
    for dt in (1e-3, 1e-4):
        cfg = make_config(dt=dt, t_end=10 * dt)
        dW = sample_increment(cfg.noise, dt, RandomStream(0))
        u_next = step(SimState(0.0, u), cfg, dW).u
        residuals.append(step_energy_residual(u, u_next, cfg, dW))
    assert residuals[0] != 0.0
    assert abs(residuals[1]) <= 0.02 * abs(residuals[0])


@pytest.mark.diagnostics
def test_energy_residual_with_noise_averages_out() -> None:
    grid = GridSpec(8)
    cfg = make_config(noise=NoiseModel(grid, sigma=1.0, n_pairs=3), dt=1e-3)
    u = random_solenoidal(grid, np.random.default_rng(6), v_norm_sq=1.0)
    stream = RandomStream(11)
    residuals, increments = [], []
    for k in range(200):
        dW = sample_increment(cfg.noise, cfg.dt, stream, k)
        u_next = step(SimState(0.0, u), cfg, dW).u
        residuals.append(step_energy_residual(u, u_next, cfg, dW))
        increment = cfg.noise.coordinates_to_field(dW.values)
        increments.append(increment.h_norm_sq())
    # the per-step residual is far below the Ito correction |G dW|^2
    assert abs(np.mean(residuals)) <= 0.1 * np.mean(increments)


@pytest.mark.diagnostics
def test_bootstrap_mean() -> None:
    samples = np.arange(100.0)
    stat = bootstrap_mean(samples, n_boot=500, seed=1)
    assert stat.mean == 49.5
    assert stat.ci_low < 49.5 < stat.ci_high
    assert stat.n == 100
    assert bootstrap_mean(np.full(5, 2.0)).ci_low == 2.0


def _ensemble(n: int, scale: float = 1.0):
    times = np.linspace(0.0, 1.0, 11)
    return [
        make_ledger(
            times,
            scale * (1.0 + k % 3) * np.ones(11),
            scale * np.ones(11),
            scale * np.ones(11),
        )
        for k in range(n)
    ]


@pytest.mark.diagnostics
def test_moment_estimates_stable() -> None:
    ladder = {4: _ensemble(MIN_ENSEMBLE), 8: _ensemble(MIN_ENSEMBLE, 1.2)}
    report = moment_estimates(ladder, p=2.0, eta=2.0, n_boot=100)
    assert report.stable
    assert report.rungs[4]["int_lp"].mean == pytest.approx(1.0)
    assert report.ratios["int_lp"] == pytest.approx(1.2)
    assert report.as_dict()["rungs"]["4"]["int_lp"]["n"] == MIN_ENSEMBLE


@pytest.mark.diagnostics
def test_moment_estimates_drift() -> None:
    ladder = {4: _ensemble(MIN_ENSEMBLE), 8: _ensemble(MIN_ENSEMBLE, 3.0)}
    assert not moment_estimates(ladder, p=2.0, eta=2.0, n_boot=100).stable


@pytest.mark.diagnostics
def test_moment_estimates_refusals() -> None:
    with pytest.raises(ValueError):
        moment_estimates(_ensemble(MIN_ENSEMBLE - 1), p=2.0, eta=2.0)
    with pytest.raises(GateViolation):
        moment_estimates(_ensemble(MIN_ENSEMBLE), p=10.0, eta=1.0)


@pytest.mark.diagnostics
def test_gradient_bound_check() -> None:
    cfg = make_config(damping=DampingParams(0.5, 3.0))
    report = gradient_bound_check({4: _ensemble(3), 8: _ensemble(3)}, cfg)
    assert report.stable
    assert report.ratio == 1.0
    # sup g_h2 + int g_v2 over [0, 1], mixed and sqrtpow vanish
    assert report.rungs[4]["lhs"] == pytest.approx(2.0)
    assert report.rungs[4]["implied_C"] == pytest.approx(1.0)
    with pytest.raises(GateViolation):
        gradient_bound_check(
            _ensemble(3), make_config(damping=DampingParams(0.4, 3.0))
        )


@pytest.mark.diagnostics
def test_energy_ball_functional() -> None:
    times = np.linspace(0.0, 1.0, 5)
    ledger = make_ledger(times, [1.0, 3.0, 2.0, 1.0, 0.5], np.ones(5))
    assert energy_ball_functional(ledger, 0.25) == pytest.approx(3.5)
    short = make_ledger(np.linspace(0.0, 0.5, 5), np.ones(5))
    with pytest.raises(IncompleteTrajectoryError):
        energy_ball_functional(short, 0.25)


@pytest.mark.diagnostics
def test_detect_exit_interpolates() -> None:
    ledger = make_ledger([0.0, 1.0, 2.0], [0.0, 1.0, 3.0])
    record = detect_exit(ledger, 2.0)
    assert record.exited
    assert record.tau == pytest.approx(1.5)
    assert record.criterion == "h_norm"


@pytest.mark.diagnostics
def test_detect_exit_never() -> None:
    ledger = make_ledger([0.0, 1.0], [0.5, 0.5])
    record = detect_exit(ledger, 1.0)
    assert not record.exited
    assert math.isinf(record.tau)
    assert record.criterion is None
    with pytest.raises(ValueError):
        detect_exit(ledger, -1.0)


@pytest.mark.diagnostics
def test_detect_exit_diffusion_criteria() -> None:
    ledger = make_ledger([0.0, 1.0], [9.0, 9.0], [0.0, 0.0], [0.0, 4.0])
    record = detect_exit(ledger, 2.0, criteria=DIFFUSION_CRITERIA)
    assert record.criterion == "lp_norm"
    assert record.tau == pytest.approx(0.5)
    with pytest.raises(ValueError):
        detect_exit(ledger, 2.0, criteria="other")


@pytest.mark.diagnostics
def test_weighted_twin_difference() -> None:
    ledgers = [make_twin([1.0, 0.8, 0.5]), make_twin([1.0, 0.6, 0.5])]
    report = weighted_twin_difference(ledgers)
    assert report.initial_mean == 1.0
    assert report.mean[1] == pytest.approx(0.7)
    assert report.max_weighted == 1.0
    assert report.nonincreasing
    assert report.bound_holds
    assert report.as_dict()["n_pairs"] == 2


@pytest.mark.diagnostics
def test_weighted_twin_difference_growth() -> None:
    report = weighted_twin_difference([make_twin([1.0, 2.0, 4.0])])
    assert not report.nonincreasing
    assert report.bound_holds is False
    unchecked = weighted_twin_difference(
        [make_twin([1.0, 2.0])], lipschitz_ok=False
    )
    assert unchecked.bound_holds is None


@pytest.mark.diagnostics
def test_weighted_twin_bound_scales_with_initial_difference() -> None:
    spread = [make_twin([1e-4, 0.0]), make_twin([1e-4, 4e-4])]
    report = weighted_twin_difference(spread)
    assert report.stderr[-1] == pytest.approx(2e-4)
    assert report.nonincreasing
    assert report.bound_holds is False
    settled = [make_twin([1e-4, 0.0]), make_twin([1e-4, 1e-4])]
    assert weighted_twin_difference(settled).bound_holds


@pytest.mark.diagnostics
def test_weighted_twin_difference_refusals() -> None:
    with pytest.raises(ValueError):
        weighted_twin_difference([])
    other = TwinLedger([TwinRow(0.0, 0.0, 1.0, 1.0), TwinRow(2.0, 0, 1, 1)])
    with pytest.raises(ValueError):
        weighted_twin_difference([make_twin([1.0, 1.0]), other])

