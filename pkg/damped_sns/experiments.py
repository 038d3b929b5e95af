"""Runners behind the command line subcommands.

Each runner takes the handle opened by ``pipeline.initialise``, writes its
outputs through ``link_write`` and returns a summary dictionary.
"""

import logging
import math
from typing import Dict, List, Optional

import numpy as np

from damped_sns import sns_utils
from damped_sns.config import DEFAULT_LADDER, ConfigError, RunConfig
from damped_sns.diagnostics import (
    MIN_ENSEMBLE,
    EnergyLedger,
    TwinLedger,
    gradient_bound_check,
    moment_estimates,
    weighted_twin_difference,
)
from damped_sns.fields import (
    GridSpec,
    SpectralVelocity,
    random_solenoidal,
    regrid,
    write_snapshot,
)
from damped_sns.gates import MOMENT_ORDER, UNIQUENESS, record_gate
from damped_sns.integrator import (
    PLAIN,
    SimConfig,
    record_trajectory,
    twin_integrate,
)
from damped_sns.ldp import (
    diffusion_sup_tail,
    energy_ball_tail,
    exit_time_tail,
    galerkin_truncation_tail,
    ldp_consistency_report,
    ledger_task,
    rate_function_eval,
    straight_path,
    tail_equivalence,
    write_ldp_csv,
)
from damped_sns.link import link_write
from damped_sns.noise import (
    ADDITIVE,
    MOMENT_ORDER_CONDITION,
    UNIQUENESS_CONDITION,
    RandomStream,
    admissible_p_range,
    polarization_basis,
    validate_hypotheses,
)
from damped_sns.properties import run_suite

SIMULATE = 10
MOMENTS = 11
TWIN = 12
PERTURBATION = 13
VALIDATION = 14


def _run(handle: dict) -> RunConfig:
    return handle["config"]


def simulate(handle: dict) -> dict:
    """One trajectory with its ledger and final snapshot; with a moment
    order in the experiment section, also the resolution ladder of moment
    (and, in strong mode, gradient) estimates."""
    run = _run(handle)
    cfg = run.sim
    stream = RandomStream(cfg.seed, SIMULATE, 0)
    ledger, summary = record_trajectory(cfg, stream)
    ledger.to_csv(link_write(handle, "ledger", "csv", "energy ledger"))
    write_snapshot(
        summary.final_state.u,
        link_write(handle, "final_state", "snap", "final velocity snapshot"),
    )
    result = {
        "n_rows": len(ledger),
        "final_t": summary.final_state.t,
        "final_h_norm_sq": summary.final_state.u.h_norm_sq(),
        "stability_ratio": cfg.stability_ratio,
        "blew_up": summary.blew_up,
    }
    if summary.blew_up:
        result["blow_up_time"] = summary.blow_up_time
    if run.experiment.p is not None:
        result.update(moment_ladder(handle))
    return sns_utils.plain(result)


def ladder_ledgers(
    cfg: SimConfig,
    resolutions: List[int],
    n_samples: int,
    workers: int = 1,
) -> Dict[int, List[EnergyLedger]]:
    """Ensembles on every rung, started from Galerkin projections of the
    initial datum built on the finest rung."""
    finest = max(resolutions)
    grids = {
        n: GridSpec(n, cfg.grid.box_length, cfg.grid.dealias_fraction)
        for n in resolutions
    }
    xi = cfg.with_grid(grids[finest]).initial.build(grids[finest])
    ladder = {}
    for n in sorted(resolutions):
        rung = cfg.with_grid(grids[n])
        tasks = [
            (rung, regrid(xi, grids[n]), (MOMENTS, k), PLAIN)
            for k in range(n_samples)
        ]
        ledgers = sns_utils.map_ordered(ledger_task, tasks, workers)
        finished = [ledger for ledger in ledgers if ledger is not None]
        if len(finished) < len(ledgers):
            logging.warning(
                "{} trajectories blew up at n={}".format(
                    len(ledgers) - len(finished), n
                )
            )
        ladder[n] = finished
    return ladder


def moment_ladder(handle: dict) -> dict:
    run = _run(handle)
    cfg, experiment = run.sim, run.experiment
    resolutions = list(experiment.resolutions or DEFAULT_LADDER)
    if experiment.n_samples < MIN_ENSEMBLE:
        raise ConfigError(
            [f"experiment.n_samples must be >= {MIN_ENSEMBLE} for moments"]
        )
    ladder = ladder_ledgers(
        cfg, resolutions, experiment.n_samples, run.workers
    )
    moments = moment_estimates(
        ladder, experiment.p, experiment.eta, experiment.n_boot, cfg.seed
    )
    report = {"moments": moments.as_dict()}
    if cfg.strong_mode:
        report["gradient"] = gradient_bound_check(ladder, cfg).as_dict()
    sns_utils.write_yaml(
        link_write(handle, "moment_report", "yaml", "resolution ladder"),
        sns_utils.plain(report),
    )
    result = {"moments_stable": moments.stable}
    if "gradient" in report:
        result["gradient_stable"] = report["gradient"]["stable"]
    return result


def _twin_task(task: tuple) -> TwinLedger:
    cfg, u1, u2, a_coeff, key = task
    ledger = TwinLedger()
    twin_integrate(
        cfg, RandomStream(cfg.seed, *key), u1, u2, a_coeff, ledger.append
    )
    return ledger


def twin(handle: dict) -> dict:
    """Twin runs sharing their noise, with the measured Lipschitz constant
    of G recorded against the uniqueness condition."""
    run = _run(handle)
    cfg, experiment = run.sim, run.experiment
    hypotheses = validate_hypotheses(
        cfg.noise, stream=RandomStream(cfg.seed, VALIDATION)
    )
    lipschitz_ok = hypotheses.lipschitz_ok_for_uniqueness
    record_gate(
        handle,
        UNIQUENESS,
        UNIQUENESS_CONDITION,
        lipschitz_ok,
        f"measured L={hypotheses.K_hat_lip:g}",
    )

    u2 = cfg.initial.build(cfg.grid)
    u1 = u2
    if experiment.perturbation > 0:
        rng = RandomStream(cfg.seed, PERTURBATION).generator()
        offset = random_solenoidal(cfg.grid, rng)
        offset = offset.scaled(
            math.sqrt(experiment.perturbation / offset.h_norm_sq())
        )
        u1 = u2 + offset
    tasks = [
        (cfg, u1, u2, experiment.a_coeff, (TWIN, k))
        for k in range(experiment.n_samples)
    ]
    ledgers = sns_utils.map_ordered(_twin_task, tasks, run.workers)
    ledgers[0].to_csv(
        link_write(handle, "twin_ledger", "csv", "first twin pair")
    )
    report = weighted_twin_difference(ledgers, lipschitz_ok)
    summary = dict(report.as_dict(), measured_L=hypotheses.K_hat_lip)
    sns_utils.write_yaml(
        link_write(handle, "twin_report", "yaml", "weighted twin difference"),
        sns_utils.plain(summary),
    )
    return sns_utils.plain(
        {
            "max_weighted_difference": report.max_weighted,
            "bound_holds": report.bound_holds,
            "nonincreasing": report.nonincreasing,
        }
    )


def _require(value: Optional[object], key: str, command: str) -> object:
    if value is None or (isinstance(value, tuple) and not value):
        raise ConfigError([f"experiment.{key} is required for {command}"])
    return value


def ldp_tail(handle: dict) -> dict:
    """Exponential equivalence tails, plus diffusion-only sup and exit-time
    tails when thresholds are given and Galerkin truncation tails when a
    resolution ladder is given."""
    run = _run(handle)
    cfg, experiment = run.sim, run.experiment
    delta = _require(experiment.delta, "delta", "ldp-tail")
    estimates = tail_equivalence(
        cfg, experiment.epsilons, delta, experiment.n_samples, run.workers
    )
    for epsilon in experiment.epsilons:
        if experiment.thresholds:
            estimates += diffusion_sup_tail(
                cfg,
                epsilon,
                experiment.thresholds,
                experiment.n_samples,
                run.workers,
            )
            estimates += exit_time_tail(
                cfg,
                epsilon,
                experiment.thresholds,
                experiment.n_samples,
                experiment.criteria,
                run.workers,
            )
        if experiment.resolutions:
            estimates += galerkin_truncation_tail(
                cfg,
                epsilon,
                list(experiment.resolutions),
                delta,
                experiment.n_samples,
                run.workers,
            )
    write_ldp_csv(
        link_write(handle, "ldp_tail", "csv", "tail estimates"), estimates
    )
    return sns_utils.plain(
        {
            "eps_log_p": [
                [e.epsilon, e.eps_log_p]
                for e in estimates
                if e.event_id == "sup_diff_h2"
            ],
            "n_estimates": len(estimates),
        }
    )


def ldp_ball(handle: dict) -> dict:
    """Energy-ball exit tails over the threshold ladder for every epsilon."""
    run = _run(handle)
    cfg, experiment = run.sim, run.experiment
    thresholds = _require(experiment.thresholds, "thresholds", "ldp-ball")
    estimates = []
    for epsilon in experiment.epsilons:
        estimates += energy_ball_tail(
            cfg, epsilon, thresholds, experiment.n_samples, run.workers
        )
    path = link_write(handle, "ldp_ball", "csv", "energy-ball tails")
    write_ldp_csv(path, estimates)
    return sns_utils.plain(
        {
            "eps_log_p": [
                [e.epsilon, e.threshold, e.eps_log_p] for e in estimates
            ]
        }
    )


def path_velocity(run: RunConfig) -> SpectralVelocity:
    """Velocity of the straight test path: the configured noise coordinates
    plus an optional component on a single unforced mode."""
    cfg, experiment = run.sim, run.experiment
    noise = cfg.noise
    coordinates = np.zeros(noise.n_coordinates)
    if experiment.path_coordinates:
        if len(experiment.path_coordinates) != noise.n_coordinates:
            raise ConfigError(
                [
                    f"experiment.path_coordinates needs {noise.n_coordinates} "
                    f"values, got {len(experiment.path_coordinates)}"
                ]
            )
        coordinates = np.asarray(experiment.path_coordinates, dtype=np.float64)
    velocity = noise.coordinates_to_field(coordinates)
    if experiment.unforced_mode is not None:
        mode = np.asarray(experiment.unforced_mode, dtype=np.int64)
        grid = cfg.grid
        if (
            len(mode) != 3
            or not any(mode)
            or not grid.retained[grid.index_of(mode)]
        ):
            raise ConfigError(
                [
                    f"experiment.unforced_mode {list(mode)} "
                    "is not a retained mode"
                ]
            )
        if any(np.array_equal(mode, m) for m in noise.forced_modes):
            logging.warning(
                "Mode {} is forced; the path stays reachable".format(mode)
            )
        amplitude = experiment.unforced_amplitude / 2.0
        vector = polarization_basis(mode)[0] * amplitude
        coefficients = np.zeros((3,) + grid.shape, dtype=np.complex128)
        coefficients[(slice(None),) + grid.index_of(mode)] = vector
        coefficients[(slice(None),) + grid.index_of(-mode)] = vector
        velocity = velocity + SpectralVelocity(coefficients, grid)
    return velocity


def ldp_rate(handle: dict) -> dict:
    """Rate function of the straight path xi + t v on [0, 1]; with a tube
    radius, also the Monte Carlo consistency report for that path."""
    run = _run(handle)
    cfg, experiment = run.sim, run.experiment
    xi = cfg.initial.build(cfg.grid)
    velocity = path_velocity(run)
    times = np.linspace(0.0, 1.0, experiment.path_points)
    control = rate_function_eval(
        xi, straight_path(xi, velocity, times), cfg.noise, times
    )
    report = {
        "cost": control.cost,
        "reachable": control.reachable,
        "path_points": experiment.path_points,
    }
    if control.reachable:
        report["quadrature_cost"] = control.quadrature_cost()
    if cfg.noise.kind == ADDITIVE and experiment.unforced_mode is None:
        c = np.asarray(
            experiment.path_coordinates or [0.0] * cfg.noise.n_coordinates
        )
        active = cfg.noise.amplitudes > 0
        report["closed_form"] = 0.5 * float(
            np.sum(c[active] ** 2 / cfg.noise.amplitudes[active])
        )
    sns_utils.write_yaml(
        link_write(handle, "rate_function", "yaml", "rate of the path"),
        sns_utils.plain(report),
    )
    if experiment.tube_radius is not None:
        consistency = ldp_consistency_report(
            cfg,
            velocity,
            experiment.tube_radius,
            experiment.epsilons,
            experiment.n_samples,
            run.workers,
        )
        sns_utils.write_yaml(
            link_write(handle, "ldp_consistency", "yaml", "tube consistency"),
            sns_utils.plain(consistency.as_dict()),
        )
        report["gap_shrinking"] = consistency.gap_shrinking
    return sns_utils.plain(report)


def validate_noise(handle: dict) -> dict:
    """Empirical growth, Lipschitz and coercivity constants of G, with the
    uniqueness and moment-order conditions evaluated at the measured
    values."""
    run = _run(handle)
    cfg, experiment = run.sim, run.experiment
    report = validate_hypotheses(
        cfg.noise,
        n_samples=max(100, experiment.n_samples),
        stream=RandomStream(cfg.seed, VALIDATION),
    )
    record_gate(
        handle,
        UNIQUENESS,
        UNIQUENESS_CONDITION,
        report.lipschitz_ok_for_uniqueness,
        f"measured L={report.K_hat_lip:g}",
    )
    if experiment.p is not None:
        low, high = admissible_p_range(report.eta)
        record_gate(
            handle,
            MOMENT_ORDER,
            MOMENT_ORDER_CONDITION,
            low <= experiment.p < high,
            f"p={experiment.p:g}, measured η={report.eta:g}",
        )
    sns_utils.write_yaml(
        link_write(handle, "noise_hypotheses", "yaml", "noise hypotheses"),
        sns_utils.plain(report.as_dict()),
    )
    return sns_utils.plain(
        {
            "L_hat": report.L_hat_growth,
            "K_hat": report.K_hat_lip,
            "lipschitz_ok_for_uniqueness": report.lipschitz_ok_for_uniqueness,
            "failures": report.failures,
        }
    )


def properties(handle: dict) -> dict:
    """The invariant suite; ``passed`` is False when any property fails."""
    run = _run(handle)
    results = run_suite(
        run.sim,
        n_samples=min(run.experiment.n_samples, 100),
        workers=run.workers,
    )
    sns_utils.write_yaml(
        link_write(handle, "properties", "yaml", "invariant suite"),
        {"results": [r.as_dict() for r in results]},
    )
    return {
        "passed": all(r.passed for r in results),
        "failures": [r.name for r in results if not r.passed],
        "n_properties": len(results),
    }


RUNNERS = {
    "simulate": simulate,
    "twin": twin,
    "ldp-tail": ldp_tail,
    "ldp-ball": ldp_ball,
    "ldp-rate": ldp_rate,
    "validate-noise": validate_noise,
    "properties": properties,
}
