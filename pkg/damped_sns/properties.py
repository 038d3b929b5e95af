"""Invariant suite run by the ``properties`` subcommand.

Each check returns a ``PropertyResult``; the suite never raises on a failed
property so that every failure is reported in one pass.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import linalg, stats

from damped_sns import sns_utils
from damped_sns.diagnostics import (
    EnergyLedger,
    TwinLedger,
    detect_exit,
    step_energy_residual,
)
from damped_sns.fields import (
    NUMERICAL_TOL,
    GridSpec,
    SpectralVelocity,
    compute_norms,
    inverse_transform,
    leray_project,
    project_array,
    random_solenoidal,
)
from damped_sns.integrator import (
    PLAIN,
    RESCALED,
    SEMI_IMPLICIT,
    TAMED,
    SimConfig,
    SimState,
    integrate,
    shear_field,
    step,
    twin_integrate,
)
from damped_sns.ldp import (
    LdpEstimate,
    difference_tail,
    energy_ball_tail,
    ledger_task,
    rate_function_eval,
    straight_path,
)
from damped_sns.noise import (
    ADDITIVE,
    MULTIPLICATIVE,
    NoiseModel,
    RandomStream,
    WienerIncrement,
    sample_increment,
)
from damped_sns.operators import (
    DampingParams,
    convective_term,
    damping_jacobian_vectors,
    damping_local_lipschitz_check,
    damping_monotonicity_check,
    damping_vectors,
    trilinear_form,
)

IDENTITY_TOL = 1e-10
JACOBIAN_TOL = 1e-6
MONOTONE_TOL = 1e-12
SHEAR_AMPLITUDE = 1e-6
SHEAR_DT = 1e-3
QP_TOL = 1e-8
KS_ALPHA = 0.01
COVARIANCE_STDERRS = 5.0
MIN_COVARIANCE_DRAWS = 1000
TAMING_LIMIT = 0.1
SMALL_TIME_EPSILON = 0.25
TIME_CHANGE_STEPS = 20
CONVOLUTION_N = 8
TAIL_DELTAS = (1e-4, 1e-3, 1e-2, 1e-1)
TAIL_THRESHOLDS = (0.25, 0.5, 1.0, 2.0)

SUITE = 100


@dataclass
class PropertyResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def as_dict(self) -> dict:
        return sns_utils.plain(vars(self))


def _result(
    name: str, measured: float, tolerance: float, detail: str = ""
) -> PropertyResult:
    passed = bool(measured <= tolerance)
    log = logging.info if passed else logging.warning
    log(
        "Property {}: {} ({:.3g} vs {:.3g})".format(
            name, "passed" if passed else "FAILED", measured, tolerance
        )
    )
    return PropertyResult(name, passed, float(measured), tolerance, detail)


def operator_identities(
    grid: GridSpec, rng: np.random.Generator, n_fields: int
) -> List[PropertyResult]:
    """b(u, v, v) = 0 and b(u, v, w) = -b(u, w, v) on random velocities."""
    worst_zero = worst_anti = 0.0
    for _ in range(n_fields):
        u, v, w = (random_solenoidal(grid, rng) for _ in range(3))
        nu, nv, nw = (math.sqrt(f.v_norm_sq()) for f in (u, v, w))
        zero = abs(trilinear_form(u, v, v)) / (nu * nv**2)
        worst_zero = max(worst_zero, zero)
        anti = trilinear_form(u, w, v) + trilinear_form(u, v, w)
        worst_anti = max(worst_anti, abs(anti) / (nu * nv * nw))
    return [
        _result("trilinear_vanishes", worst_zero, IDENTITY_TOL),
        _result("trilinear_antisymmetric", worst_anti, IDENTITY_TOL),
    ]


def _random_vectors(
    rng: np.random.Generator, n: int, low: float = 0.0, high: float = 2.0
) -> np.ndarray:
    direction = rng.standard_normal((n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return direction * rng.uniform(low, high, size=(n, 1))


def damping_calculus(
    damping: DampingParams, rng: np.random.Generator, n_points: int
) -> List[PropertyResult]:
    """Jacobian against central differences, monotonicity, the pointwise
    bound |(g'(u) v) . w| <= alpha beta |u|^(beta-1) |v| |w| and the local
    Lipschitz bound."""
    u = _random_vectors(rng, n_points, 0.5, 2.0)
    h = _random_vectors(rng, n_points, 1.0, 1.0)
    jac = damping_jacobian_vectors(u, damping)
    step_size = 1e-5
    central = (
        damping_vectors(u + step_size * h, damping)
        - damping_vectors(u - step_size * h, damping)
    ) / (2.0 * step_size)
    exact = np.einsum("nij,nj->ni", jac, h)
    error = np.linalg.norm(central - exact, axis=1)
    rel = error / np.linalg.norm(exact, axis=1)

    a = _random_vectors(rng, 10 * n_points)
    b = _random_vectors(rng, 10 * n_points)
    monotone = damping_monotonicity_check(a, b, damping)
    scale = np.maximum(1.0, np.linalg.norm(a - b, axis=1) ** 2)
    worst_monotone = float(np.max(-monotone / scale))

    c = _random_vectors(rng, 10 * n_points)
    jac_a = damping_jacobian_vectors(a, damping)
    lhs = np.abs(np.einsum("ni,nij,nj->n", c, jac_a, b))
    bound = (
        damping.alpha
        * damping.beta
        * np.linalg.norm(a, axis=1) ** (damping.beta - 1.0)
        * np.linalg.norm(b, axis=1)
        * np.linalg.norm(c, axis=1)
    )
    worst_bound = float(np.max((lhs - bound) / np.maximum(bound, 1e-300)))

    results = [
        _result("damping_jacobian", float(np.max(rel)), JACOBIAN_TOL),
        _result("damping_monotone", worst_monotone, MONOTONE_TOL),
        _result("damping_jacobian_bound", worst_bound, MONOTONE_TOL),
    ]
    if damping.beta >= 2:
        lip_lhs, lip_rhs = damping_local_lipschitz_check(a, b, damping)
        excess = float(
            np.max((lip_lhs - lip_rhs) / np.maximum(lip_rhs, 1e-300))
        )
        results.append(
            _result("damping_local_lipschitz", excess, MONOTONE_TOL)
        )
    return results


def norm_identities(
    grid: GridSpec, beta: float, rng: np.random.Generator, n_fields: int
) -> List[PropertyResult]:
    """|grad u|^2 = ||u||^2, the Poincare inequality and idempotent
    projection onto divergence-free fields."""
    worst_grad = worst_projection = 0.0
    poincare_failures = 0
    for _ in range(n_fields):
        u = random_solenoidal(grid, rng)
        norms = compute_norms(u, beta)
        worst_grad = max(
            worst_grad,
            abs(norms.grad_h_norm_sq - norms.v_norm_sq) / norms.v_norm_sq,
        )
        poincare_failures += not norms.poincare_holds(grid)
        again = leray_project(u)
        worst_projection = max(
            worst_projection,
            float(np.max(np.abs(again.coefficients - u.coefficients)))
            / u.magnitude(),
        )
    return [
        _result("grad_h_equals_v_norm", worst_grad, IDENTITY_TOL),
        _result("poincare", float(poincare_failures), 0.0),
        _result("projection_idempotent", worst_projection, NUMERICAL_TOL),
    ]


def shear_oracle(grid: GridSpec, mu: float = 1.0) -> List[PropertyResult]:
    """Noise-free small shear mode against the scalar recursion
    A_k+1 = A_k / (1 + dt mu |kappa|^2), and against A exp(-mu |kappa|^2 t)."""
    cfg = SimConfig(
        grid=grid,
        damping=DampingParams(1.0, 3.0),
        mu=mu,
        noise=NoiseModel(grid, sigma=0.0, n_pairs=1),
        dt=SHEAR_DT,
        t_end=1.0,
    )
    state = SimState(0.0, shear_field(grid, SHEAR_AMPLITUDE))
    kappa_sq = (2.0 * math.pi / grid.box_length) ** 2
    factor = 1.0 / (1.0 + cfg.dt * mu * kappa_sq)
    zero = WienerIncrement(np.zeros(cfg.noise.n_coordinates), cfg.dt)
    expected = SHEAR_AMPLITUDE
    worst = 0.0
    for _ in range(cfg.n_steps):
        state = step(state, cfg, zero)
        expected *= factor
        amplitude = -2.0 * state.u.coefficients[0, 0, 1, 0].imag
        worst = max(worst, abs(amplitude - expected) / expected)
    decay = math.exp(-mu * kappa_sq * cfg.t_end) * SHEAR_AMPLITUDE
    return [
        _result("shear_recursion", worst, IDENTITY_TOL),
        _result(
            "shear_exponential_decay",
            abs(amplitude - decay) / decay,
            1e-2,
            f"final amplitude {amplitude:.12g}, exp decay {decay:.12g}",
        ),
    ]


def energy_balance(
    cfg: SimConfig, n_trajectories: int, n_steps: int, seed: int
) -> PropertyResult:
    """Ensemble mean of the per-step Ito energy balance residual."""
    residuals = []
    scale = 0.0
    for k in range(n_trajectories):
        stream = RandomStream(seed, SUITE, 1, k)
        rng = RandomStream(seed, SUITE, 2, k).generator()
        state = SimState(0.0, random_solenoidal(cfg.grid, rng, v_norm_sq=1.0))
        for index in range(n_steps):
            dW = sample_increment(cfg.noise, cfg.dt, stream, index)
            new_state = step(state, cfg, dW)
            residuals.append(
                step_energy_residual(state.u, new_state.u, cfg, dW)
            )
            scale = max(scale, state.u.h_norm_sq())
            state = new_state
    mean = abs(float(np.mean(residuals)))
    return _result(
        "energy_balance",
        mean,
        5.0 * cfg.dt * max(1.0, scale + cfg.noise.trace),
    )


def determinism(
    cfg: SimConfig, seed: int, workers: int
) -> List[PropertyResult]:
    """Equal seeds give bit-identical ledgers, in process and in workers."""
    first, second = EnergyLedger(), EnergyLedger()
    integrate(cfg, RandomStream(seed, SUITE, 3), first.append)
    integrate(cfg, RandomStream(seed, SUITE, 3), second.append)
    identical = all(
        a.values() == b.values() for a, b in zip(first, second)
    ) and len(first) == len(second)

    xi = cfg.initial.build(cfg.grid)
    tasks = [(cfg, xi, (SUITE, 4, k), "plain") for k in range(2)]
    serial = sns_utils.map_ordered(ledger_task, tasks, 1)
    parallel = sns_utils.map_ordered(ledger_task, tasks, max(2, workers))
    same = all(
        a is not None
        and b is not None
        and np.array_equal(a.column("h2"), b.column("h2"))
        for a, b in zip(serial, parallel)
    )
    results = [
        _result("equal_seeds_identical", float(not identical), 0.0),
        _result("worker_count_invariant", float(not same), 0.0),
    ]
    taus = [detect_exit(first, M, 1.0).tau for M in (0.0, 0.5, 1.0, 10.0, 1e6)]
    monotone = all(b >= a for a, b in zip(taus, taus[1:]))
    results.append(_result("exit_time_monotone", float(not monotone), 0.0))
    return results


def twin_identity(cfg: SimConfig, seed: int) -> PropertyResult:
    """Equal initial data give an identically zero weighted difference."""
    u0 = cfg.initial.build(cfg.grid)
    ledger = TwinLedger()
    stream = RandomStream(seed, SUITE, 5)
    twin_integrate(cfg, stream, u0, u0, 1.0, ledger.append)
    return _result(
        "twin_zero_difference", float(np.max(ledger.column("weighted"))), 0.0
    )


def _additive(noise: NoiseModel) -> NoiseModel:
    sigma = noise.sigma if noise.sigma > 0 else 0.1
    return replace(noise, kind=ADDITIVE, sigma=sigma)


def rate_function_properties(
    cfg: SimConfig, rng: np.random.Generator
) -> List[PropertyResult]:
    """Constant path, closed form, reachability, refinement invariance and
    quadratic scaling of the rate function."""
    noise = _additive(cfg.noise)
    xi = cfg.initial.build(cfg.grid)
    times = np.linspace(0.0, 1.0, 11)
    constant = rate_function_eval(xi, [xi] * len(times), noise, times).cost

    c = rng.standard_normal(noise.n_coordinates)
    velocity = noise.coordinates_to_field(c)
    cost = rate_function_eval(
        xi, straight_path(xi, velocity, times), noise, times
    ).cost
    closed = 0.5 * float(np.sum(c**2 / noise.amplitudes))

    fine = np.linspace(0.0, 1.0, 21)
    fine_cost = rate_function_eval(
        xi, straight_path(xi, velocity, fine), noise, fine
    ).cost
    scaled_cost = rate_function_eval(
        xi, straight_path(xi, velocity.scaled(3.0), times), noise, times
    ).cost

    outside = random_solenoidal(cfg.grid, rng)
    coordinates = noise.field_to_coordinates(outside)
    outside = outside - noise.coordinates_to_field(coordinates)
    if outside.h_norm_sq() <= NUMERICAL_TOL:
        unreachable_result = _result(
            "rate_unreachable",
            0.0,
            0.0,
            "the noise forces every retained mode",
        )
    else:
        unreachable = rate_function_eval(
            xi, straight_path(xi, outside, times), noise, times
        ).cost
        unreachable_result = _result(
            "rate_unreachable", float(not math.isinf(unreachable)), 0.0
        )
    return [
        _result("rate_constant_path", constant, 0.0),
        _result("rate_closed_form", abs(cost - closed) / closed, IDENTITY_TOL),
        _result("rate_refinement", abs(fine_cost - cost) / cost, 1e-8),
        _result(
            "rate_quadratic_scaling",
            abs(scaled_cost - 9.0 * cost) / (9.0 * cost),
            IDENTITY_TOL,
        ),
        unreachable_result,
    ]


def time_change(
    cfg: SimConfig, n_trajectories: int, n_steps: int, seed: int
) -> PropertyResult:
    """|u_eps(1)|_H^2 of the rescaled system against |u(eps)|_H^2 of the
    plain one, compared by a two-sample Kolmogorov-Smirnov test on
    independent streams."""
    epsilon = cfg.epsilon or SMALL_TIME_EPSILON
    rescaled = replace(cfg, epsilon=epsilon, dt=1.0 / n_steps, t_end=1.0)
    plain = replace(cfg, epsilon=None, dt=epsilon / n_steps, t_end=epsilon)
    xi = cfg.initial.build(cfg.grid)
    samples = []
    for branch, run, mode in ((6, rescaled, RESCALED), (7, plain, PLAIN)):
        energies = []
        for k in range(n_trajectories):
            summary = integrate(
                run,
                RandomStream(seed, SUITE, branch, k),
                mode=mode,
                initial=xi,
                abort_on_blow_up=False,
            )
            energies.append(
                math.inf
                if summary.blew_up
                else summary.final_state.u.h_norm_sq()
            )
        samples.append(np.array(energies))
    if cfg.noise.sigma == 0:
        gap = abs(samples[0][0] - samples[1][0])
        return _result(
            "time_change_ks",
            gap / max(samples[1][0], 1e-300),
            IDENTITY_TOL,
            "noise-free, compared pathwise",
        )
    statistic, pvalue = stats.ks_2samp(samples[0], samples[1])
    critical = math.sqrt(-math.log(KS_ALPHA / 2.0) / n_trajectories)
    return _result(
        "time_change_ks", float(statistic), critical, f"p-value {pvalue:.3g}"
    )


def taming_order(
    cfg: SimConfig, rng: np.random.Generator, n_fields: int
) -> PropertyResult:
    """Tamed and plain steps differ by at most
    dt^2 alpha^2 ||u|^(2 beta - 1)|_2 while dt alpha |u|^(beta-1) < 0.1."""
    d = cfg.damping
    still = WienerIncrement(np.zeros(cfg.noise.n_coordinates), cfg.dt)
    worst = 0.0
    for _ in range(n_fields):
        u = random_solenoidal(cfg.grid, rng, v_norm_sq=1.0)
        physical = inverse_transform(u)
        magnitude = physical.magnitude()
        peak = d.alpha * float(np.max(magnitude)) ** (d.beta - 1.0)
        dt = min(cfg.dt, 0.5 * TAMING_LIMIT / max(peak, 1e-300))
        plain, tamed = (
            step(
                SimState(0.0, u),
                replace(cfg, dt=dt, t_end=dt, scheme=scheme),
                still,
            ).u
            for scheme in (SEMI_IMPLICIT, TAMED)
        )
        bound = (
            dt**2
            * d.alpha**2
            * math.sqrt(physical.integrate(magnitude ** (4.0 * d.beta - 2.0)))
        )
        worst = max(worst, math.sqrt((plain - tamed).h_norm_sq()) / bound)
    return _result("tamed_second_order", worst, 1.0 + IDENTITY_TOL)


def direct_convection(u: SpectralVelocity) -> np.ndarray:
    """P[(u . grad) u] by summing c_j(p) i kappa_j(q) c(q) over all pairs of
    retained modes with p + q retained. Agrees with ``convective_term`` on
    grids where the pseudo-spectral product does not alias."""
    grid = u.grid
    modes = grid.galerkin_modes
    c = u.coefficients[(slice(None),) + grid.index_of(modes)]
    kappa = (2.0 * math.pi / grid.box_length) * modes.T
    grad = 1j * c[:, np.newaxis, :] * kappa[np.newaxis, :, :]
    half = grid.n_per_axis // 2
    out = np.zeros((3,) + grid.shape, dtype=np.complex128)
    for a, p in enumerate(modes):
        k = p + modes
        inside = np.all(np.abs(k) < half, axis=1)
        index = grid.index_of(k[inside])
        keep = grid.retained[index]
        term = np.einsum("j,ijq->iq", c[:, a], grad[:, :, inside][:, :, keep])
        out[(slice(None),) + tuple(ix[keep] for ix in index)] += term
    return project_array(out, grid)


def convolution_oracle(
    box_length: float, rng: np.random.Generator, n_fields: int
) -> PropertyResult:
    grid = GridSpec(CONVOLUTION_N, box_length)
    worst = 0.0
    for _ in range(n_fields):
        u = random_solenoidal(grid, rng)
        direct = direct_convection(u)
        error = np.max(np.abs(convective_term(u).coefficients - direct))
        worst = max(worst, float(error) / float(np.max(np.abs(direct))))
    return _result("convective_convolution", worst, IDENTITY_TOL)


def quadratic_program_rate(
    g_path: Sequence[SpectralVelocity],
    noise: NoiseModel,
    times: Sequence[float],
) -> float:
    """min 1/2 sum_i dt_i |Q^-1/2 h_i|^2 subject to the noise coordinates of
    G(g_i) h_i matching those of the path velocity, solved as one KKT system
    over the whole path. Assumes a reachable path."""
    dt = np.diff(np.asarray(times, dtype=np.float64))
    n, m = noise.n_coordinates, len(dt)
    basis = np.eye(n)
    gram = np.column_stack(
        [
            noise.field_to_coordinates(noise.coordinates_to_field(basis[j]))
            for j in range(n)
        ]
    )
    hessian = np.diag(np.repeat(dt, n) / np.tile(noise.amplitudes, m))
    constraint = linalg.block_diag(
        *[noise.gain(g_path[i]) * gram for i in range(m)]
    )
    target = np.concatenate(
        [
            noise.field_to_coordinates(g_path[i + 1] - g_path[i]) / dt[i]
            for i in range(m)
        ]
    )
    kkt = np.block(
        [[hessian, constraint.T], [constraint, np.zeros((n * m, n * m))]]
    )
    solution = linalg.solve(kkt, np.concatenate([np.zeros(n * m), target]))
    h = solution[: n * m]
    return 0.5 * float(h @ hessian @ h)


def rate_qp_oracle(
    cfg: SimConfig, rng: np.random.Generator
) -> PropertyResult:
    additive = _additive(cfg.noise)
    xi = cfg.initial.build(cfg.grid)
    times = np.linspace(0.0, 1.0, 11)
    worst = 0.0
    for noise in (additive, replace(additive, kind=MULTIPLICATIVE)):
        velocity = noise.coordinates_to_field(
            rng.standard_normal(noise.n_coordinates)
        )
        path = straight_path(xi, velocity, times)
        cost = rate_function_eval(xi, path, noise, times).cost
        oracle = quadratic_program_rate(path, noise, times)
        worst = max(worst, abs(cost - oracle) / oracle)
    return _result("rate_qp_oracle", worst, QP_TOL)


def noise_covariance(
    noise: NoiseModel, n_draws: int, dt: float, seed: int
) -> List[PropertyResult]:
    """Sample covariance of the increments against Q dt, entry by entry in
    standard errors, and realness of the increment fields."""
    if noise.sigma == 0:
        noise = _additive(noise)
    stream = RandomStream(seed, SUITE, 8)
    draws = np.array(
        [sample_increment(noise, dt, stream, k).values for k in range(n_draws)]
    )
    covariance = draws.T @ draws / n_draws
    q = noise.amplitudes * dt
    expected = np.diag(q)
    stderr = np.sqrt((np.outer(q, q) + expected**2) / n_draws)
    worst_z = float(np.max(np.abs(covariance - expected) / stderr))
    worst_real = 0.0
    for values in draws[:10]:
        forced = noise.coordinates_to_field(values)
        worst_real = max(
            worst_real, forced.hermitian_defect(), forced.divergence_defect()
        )
    return [
        _result("noise_covariance", worst_z, COVARIANCE_STDERRS),
        _result("increment_real", worst_real, NUMERICAL_TOL),
    ]


def _increases(estimates: Sequence[LdpEstimate]) -> float:
    p_hat = [e.p_hat for e in estimates]
    return float(sum(b > a for a, b in zip(p_hat, p_hat[1:])))


def tail_monotonicity(
    cfg: SimConfig, n_samples: int, n_steps: int, workers: int
) -> List[PropertyResult]:
    """Tail estimates are nonincreasing along increasing delta and M."""
    epsilon = cfg.epsilon or SMALL_TIME_EPSILON
    run = replace(cfg, dt=1.0 / n_steps, t_end=1.0)
    by_delta = difference_tail(run, epsilon, TAIL_DELTAS, n_samples, workers)
    by_threshold = energy_ball_tail(
        run, epsilon, TAIL_THRESHOLDS, n_samples, workers
    )
    return [
        _result("tail_monotone_delta", _increases(by_delta), 0.0),
        _result("tail_monotone_threshold", _increases(by_threshold), 0.0),
    ]


def run_suite(
    cfg: SimConfig,
    n_samples: int = 10,
    seed: Optional[int] = None,
    workers: int = 1,
    n_steps: int = 100,
) -> List[PropertyResult]:
    """Every invariant at desk scale; ``n_samples`` sets the number of
    random fields and trajectories."""
    seed = cfg.seed if seed is None else seed
    rng = RandomStream(seed, SUITE).generator()
    checks: List[Callable[[], object]] = [
        lambda: operator_identities(cfg.grid, rng, n_samples),
        lambda: damping_calculus(cfg.damping, rng, 100 * n_samples),
        lambda: norm_identities(cfg.grid, cfg.damping.beta, rng, n_samples),
        lambda: shear_oracle(cfg.grid, cfg.mu),
        lambda: energy_balance(cfg, n_samples, n_steps, seed),
        lambda: determinism(cfg, seed, workers),
        lambda: twin_identity(cfg, seed),
        lambda: rate_function_properties(cfg, rng),
        lambda: time_change(
            cfg, 10 * n_samples, min(n_steps, TIME_CHANGE_STEPS), seed
        ),
        lambda: taming_order(cfg, rng, n_samples),
        lambda: convolution_oracle(cfg.grid.box_length, rng, n_samples),
        lambda: noise_covariance(
            cfg.noise,
            max(MIN_COVARIANCE_DRAWS, 100 * n_samples),
            cfg.dt,
            seed,
        ),
        lambda: rate_qp_oracle(cfg, rng),
        lambda: tail_monotonicity(cfg, n_samples, n_steps, workers),
    ]
    results: List[PropertyResult] = []
    for check in checks:
        outcome = check()
        if isinstance(outcome, list):
            results.extend(outcome)
        else:
            results.append(outcome)
    failed = [r.name for r in results if not r.passed]
    logging.info(
        "Property suite: {} of {} passed".format(
            len(results) - len(failed), len(results)
        )
    )
    return results
