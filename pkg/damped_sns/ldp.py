"""Small-time large deviation experiments.

Every tail experiment runs the time-rescaled system u_eps(t) = u(eps t) on
[0, 1]. Samples are independent tasks keyed by (seed, experiment, sample) and
folded in sample order, so estimates do not depend on the worker count.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.stats import norm

from damped_sns import sns_utils
from damped_sns.diagnostics import (
    DIFFUSION_CRITERIA,
    RESCALED_CRITERIA,
    EnergyLedger,
    detect_exit,
    energy_ball_functional,
)
from damped_sns.fields import GridSpec, SpectralVelocity, regrid
from damped_sns.integrator import (
    DIFFUSION,
    RESCALED,
    BlowUpError,
    SimConfig,
    SimState,
    record_trajectory,
    step_diffusion_only,
    step_rescaled,
)
from damped_sns.noise import (
    ADDITIVE,
    NoiseModel,
    RandomStream,
    sample_increment,
)

LDP_COLUMNS = (
    "epsilon",
    "event_id",
    "M_or_delta",
    "n",
    "hits",
    "p_hat",
    "eps_log_p",
    "ci_low",
    "ci_high",
)

CONFIDENCE = 0.95
MIN_TAIL_SAMPLES = 1000
MIN_TUBE_HITS = 10
START_TOL = 1e-10
RESIDUAL_TOL = 1e-8

TAIL_EQUIVALENCE = 1
ENERGY_BALL = 2
DIFFUSION_SUP = 3
EXIT_TIME = 4
GALERKIN_TRUNCATION = 5
TUBE = 6


def wilson_interval(
    hits: int, n: int, confidence: float = CONFIDENCE
) -> tuple:
    """Wilson score interval for a binomial proportion."""
    if n < 1 or not 0 <= hits <= n:
        raise ValueError(f"Invalid binomial counts: {hits} hits of {n}")
    z = float(norm.ppf(0.5 + confidence / 2.0))
    p = hits / n
    denominator = 1.0 + z * z / n
    centre = (p + z * z / (2.0 * n)) / denominator
    spread = p * (1.0 - p) / n + z * z / (4.0 * n * n)
    half = z / denominator * math.sqrt(spread)
    return min(p, max(0.0, centre - half)), max(p, min(1.0, centre + half))


def _eps_log(epsilon: float, p: float) -> float:
    return epsilon * math.log(p) if p > 0 else -math.inf


@dataclass(frozen=True)
class LdpEstimate:
    """Monte Carlo estimate of the probability of one tail event."""

    epsilon: float
    event_id: str
    threshold: float
    n_samples: int
    hits: int

    def __post_init__(self) -> None:
        if self.n_samples < 1 or not 0 <= self.hits <= self.n_samples:
            raise ValueError(
                f"Invalid counts: {self.hits} hits of {self.n_samples}"
            )

    @property
    def p_hat(self) -> float:
        return self.hits / self.n_samples

    @property
    def eps_log_p(self) -> float:
        """eps log p_hat, -inf when nothing was hit."""
        return _eps_log(self.epsilon, self.p_hat)

    @property
    def eps_log_bound(self) -> float:
        """One-sided rule-of-three bound eps log(3/n) used for zero counts."""
        return self.epsilon * math.log(3.0 / self.n_samples)

    @property
    def ci_low(self) -> float:
        return wilson_interval(self.hits, self.n_samples)[0]

    @property
    def ci_high(self) -> float:
        return wilson_interval(self.hits, self.n_samples)[1]

    @property
    def eps_log_interval(self) -> tuple:
        low, high = wilson_interval(self.hits, self.n_samples)
        return _eps_log(self.epsilon, low), _eps_log(self.epsilon, high)

    def csv_row(self) -> tuple:
        eps_log = (
            self.eps_log_p
            if self.hits
            else "<=" + sns_utils.format_float(self.eps_log_bound)
        )
        return (
            float(self.epsilon),
            self.event_id,
            float(self.threshold),
            self.n_samples,
            self.hits,
            float(self.p_hat),
            eps_log,
            self.ci_low,
            self.ci_high,
        )


def write_ldp_csv(path: str, estimates: Sequence[LdpEstimate]) -> str:
    logging.info(
        "Writing {} tail estimates to {}".format(len(estimates), path)
    )
    return sns_utils.write_csv(
        path, LDP_COLUMNS, (estimate.csv_row() for estimate in estimates)
    )


def _count(
    epsilon: float,
    event_id: str,
    thresholds: Sequence[float],
    values: Sequence[float],
    above: bool = True,
) -> List[LdpEstimate]:
    values = np.asarray(values, dtype=np.float64)
    estimates = []
    for threshold in thresholds:
        hits = values > threshold if above else values < threshold
        estimates.append(
            LdpEstimate(
                epsilon,
                event_id,
                float(threshold),
                len(values),
                int(hits.sum()),
            )
        )
    return estimates


def _on_unit_interval(cfg: SimConfig, epsilon: float) -> SimConfig:
    if not 0 < epsilon <= 1:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    return replace(cfg, epsilon=epsilon, t_end=1.0)


def _check_increasing(values: Sequence[float], name: str) -> None:
    if len(values) == 0:
        raise ValueError(f"No {name} given")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"{name} must be strictly increasing, got {values}")


def _paired_difference_task(task: tuple) -> float:
    """sup_t |u_eps(t) - v_eps(t)|_H^2 for one pair sharing the noise."""
    cfg, xi, key = task
    stream = RandomStream(cfg.seed, *key)
    u = v = SimState(0.0, xi)
    sup = 0.0
    try:
        for step_index in range(cfg.n_steps):
            dW = sample_increment(cfg.noise, cfg.dt, stream, step_index)
            u = step_rescaled(u, cfg, dW)
            v = step_diffusion_only(v, cfg, dW)
            sup = max(sup, (u.u - v.u).h_norm_sq())
    except BlowUpError:
        return math.inf
    return sup


def ledger_task(task: tuple) -> Optional[EnergyLedger]:
    """Ledger of one trajectory, None if it blew up."""
    cfg, xi, key, mode = task
    ledger, summary = record_trajectory(
        cfg, RandomStream(cfg.seed, *key), mode, xi
    )
    return None if summary.blew_up else ledger


def _column_sup(ledger: Optional[EnergyLedger], column: str) -> float:
    if ledger is None:
        return math.inf
    return float(np.max(ledger.column(column)))


def _ledgers(
    cfg: SimConfig, mode: str, branch: int, n_samples: int, workers: int
) -> List[Optional[EnergyLedger]]:
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    xi = cfg.initial.build(cfg.grid)
    tasks = [(cfg, xi, (branch, k), mode) for k in range(n_samples)]
    ledgers = sns_utils.map_ordered(ledger_task, tasks, workers)
    blown = sum(ledger is None for ledger in ledgers)
    if blown:
        logging.warning(
            "{} of {} trajectories blew up".format(blown, n_samples)
        )
    return ledgers


def difference_tail(
    cfg: SimConfig,
    epsilon: float,
    deltas: Sequence[float],
    n_samples: int,
    workers: int = 1,
) -> List[LdpEstimate]:
    """P(sup_t |u_eps(t) - v_eps(t)|_H^2 > delta) per delta, all thresholds
    counted on the same pairs."""
    _check_increasing(deltas, "deltas")
    if not deltas[0] > 0:
        raise ValueError(f"delta must be > 0, got {deltas[0]}")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    run = _on_unit_interval(cfg, epsilon)
    xi = cfg.initial.build(cfg.grid)
    tasks = [(run, xi, (TAIL_EQUIVALENCE, k)) for k in range(n_samples)]
    sups = sns_utils.map_ordered(_paired_difference_task, tasks, workers)
    return _count(epsilon, "sup_diff_h2", deltas, sups)


def tail_equivalence(
    cfg: SimConfig,
    epsilons: Sequence[float],
    delta: float,
    n_samples: int,
    workers: int = 1,
) -> List[LdpEstimate]:
    """P(sup_t |u_eps(t) - v_eps(t)|_H^2 > delta) for the rescaled system and
    its diffusion-only part driven by the same increments."""
    if not delta > 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    if n_samples < MIN_TAIL_SAMPLES:
        raise ValueError(
            f"n_samples must be >= {MIN_TAIL_SAMPLES}, got {n_samples}"
        )
    estimates = []
    for epsilon in epsilons:
        estimate = difference_tail(cfg, epsilon, [delta], n_samples, workers)
        logging.info(
            "Exponential equivalence eps={:g}: {} hits of {}".format(
                epsilon, estimate[0].hits, n_samples
            )
        )
        estimates.extend(estimate)
    return estimates


def energy_ball_tail(
    cfg: SimConfig,
    epsilon: float,
    thresholds: Sequence[float],
    n_samples: int,
    workers: int = 1,
) -> List[LdpEstimate]:
    """P(sup_{t<=1} |u_eps|_H^2 + 2 eps int ||u_eps||^2 > M) per threshold."""
    _check_increasing(thresholds, "thresholds")
    run = _on_unit_interval(cfg, epsilon)
    ledgers = _ledgers(run, RESCALED, ENERGY_BALL, n_samples, workers)
    values = [
        math.inf if ledger is None else energy_ball_functional(ledger, epsilon)
        for ledger in ledgers
    ]
    return _count(epsilon, "energy_ball", thresholds, values)


def diffusion_sup_tail(
    cfg: SimConfig,
    epsilon: float,
    thresholds: Sequence[float],
    n_samples: int,
    workers: int = 1,
) -> List[LdpEstimate]:
    """P(sup_{t<=1} ||v_eps||^2 > M) and P(sup_{t<=1} |v_eps|_{beta+1}^{beta+1}
    > M) for the diffusion-only system."""
    _check_increasing(thresholds, "thresholds")
    run = _on_unit_interval(cfg, epsilon)
    ledgers = _ledgers(run, DIFFUSION, DIFFUSION_SUP, n_samples, workers)
    estimates = []
    for event_id, column in (("sup_v2", "v2"), ("sup_lp", "lp")):
        values = [_column_sup(ledger, column) for ledger in ledgers]
        estimates.extend(_count(epsilon, event_id, thresholds, values))
    return estimates


def exit_time_tail(
    cfg: SimConfig,
    epsilon: float,
    thresholds: Sequence[float],
    n_samples: int,
    criteria: str = RESCALED_CRITERIA,
    workers: int = 1,
) -> List[LdpEstimate]:
    """P(tau_{eps,M} <= 1), with the three-criterion stopping time of the
    rescaled system or the two-criterion one of the diffusion-only system."""
    _check_increasing(thresholds, "thresholds")
    if criteria not in (RESCALED_CRITERIA, DIFFUSION_CRITERIA):
        raise ValueError(f"Unknown exit criteria {criteria!r}")
    mode = RESCALED if criteria == RESCALED_CRITERIA else DIFFUSION
    run = _on_unit_interval(cfg, epsilon)
    ledgers = _ledgers(run, mode, EXIT_TIME, n_samples, workers)
    estimates = []
    for M in thresholds:
        hits = sum(
            ledger is None
            or detect_exit(ledger, M, epsilon, criteria).tau <= run.t_end
            for ledger in ledgers
        )
        estimates.append(
            LdpEstimate(epsilon, f"exit_{criteria}", float(M), n_samples, hits)
        )
    return estimates


def _truncation_task(task: tuple) -> List[float]:
    """sup_t |u_ref(t) - u_n(t)|_H^2 per coarse rung, all rungs driven by the
    same increments from Galerkin projections of the same data."""
    configs, xi_ref, key = task
    reference = configs[-1]
    stream = RandomStream(reference.seed, *key)
    states = [SimState(0.0, regrid(xi_ref, run.grid)) for run in configs]
    sups = [0.0] * (len(configs) - 1)
    try:
        for step_index in range(reference.n_steps):
            dW = sample_increment(
                reference.noise, reference.dt, stream, step_index
            )
            states = [
                step_rescaled(state, run, dW)
                for state, run in zip(states, configs)
            ]
            for i, state in enumerate(states[:-1]):
                difference = regrid(state.u, reference.grid) - states[-1].u
                sups[i] = max(sups[i], difference.h_norm_sq())
    except BlowUpError:
        return [math.inf] * (len(configs) - 1)
    return sups


def galerkin_truncation_tail(
    cfg: SimConfig,
    epsilon: float,
    resolutions: Sequence[int],
    delta: float,
    n_samples: int,
    workers: int = 1,
) -> List[LdpEstimate]:
    """P(sup_t |u_eps,ref - u_eps,n|_H^2 > delta) for each rung n below the
    finest resolution, which serves as reference."""
    _check_increasing(resolutions, "resolutions")
    if len(resolutions) < 2:
        raise ValueError("The resolution ladder needs at least two rungs")
    if not delta > 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    run = _on_unit_interval(cfg, epsilon)
    configs = [
        run.with_grid(
            GridSpec(n, cfg.grid.box_length, cfg.grid.dealias_fraction)
        )
        for n in resolutions
    ]
    xi_ref = configs[-1].initial.build(configs[-1].grid)
    tasks = [
        (configs, xi_ref, (GALERKIN_TRUNCATION, k)) for k in range(n_samples)
    ]
    sups = np.array(sns_utils.map_ordered(_truncation_task, tasks, workers))
    estimates = []
    for i, n in enumerate(resolutions[:-1]):
        estimates.extend(
            _count(epsilon, f"truncation_n{n}", [delta], sups[:, i])
        )
    return estimates


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Minimal-energy control of a field path.

    Args:
        |   times: increasing time grid
        |   h_dot: control derivative per interval, in noise coordinates
        |   cost: 1/2 int |Q^-1/2 h_dot|^2, inf when the path is unreachable
        |   amplitudes: eigenvalues q_j of Q
    """

    times: np.ndarray
    h_dot: np.ndarray
    cost: float
    amplitudes: np.ndarray

    @property
    def reachable(self) -> bool:
        return not math.isinf(self.cost)

    def quadrature_cost(self) -> float:
        """1/2 sum_i dt_i sum_j h_dot_ij^2 / q_j over forced coordinates."""
        active = self.amplitudes > 0
        rates = self.h_dot[:, active] ** 2 / self.amplitudes[active]
        energy = np.sum(rates, 1)
        return 0.5 * float(np.sum(energy * np.diff(self.times)))


def _embed(s: SpectralVelocity) -> np.ndarray:
    """Real vector whose Euclidean norm is the H norm of the field."""
    c = s.coefficients.reshape(-1)
    return math.sqrt(s.grid.volume) * np.concatenate([c.real, c.imag])


def straight_path(
    xi: SpectralVelocity, velocity: SpectralVelocity, times: Sequence[float]
) -> List[SpectralVelocity]:
    """g(t) = xi + t velocity sampled on ``times``."""
    return [xi + velocity.scaled(float(t)) for t in times]


def rate_function_eval(
    xi: SpectralVelocity,
    g_path: Sequence[SpectralVelocity],
    noise: NoiseModel,
    times: Sequence[float],
) -> ControlPath:
    """Cost of the cheapest control reproducing a piecewise-linear path.

    On each interval G(t_i, g(t_i)) h_dot = (g(t_i+1) - g(t_i)) / dt_i is
    solved in the minimum norm least squares sense in the whitened
    coordinates z = Q^-1/2 h_dot. Components of the path velocity outside
    the range of G make the path unreachable and the cost infinite.
    """
    times = np.asarray(times, dtype=np.float64)
    if len(times) < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("The time grid must be increasing with >= 2 points")
    if len(g_path) != len(times):
        raise ValueError(
            f"{len(g_path)} path points for a grid of {len(times)} times"
        )
    start_gap = (g_path[0] - xi).h_norm_sq() ** 0.5
    if start_gap > START_TOL * max(1.0, xi.h_norm_sq() ** 0.5):
        raise ValueError(
            "The path does not start at the initial datum "
            f"(gap {start_gap:.3g})"
        )

    sqrt_q = np.sqrt(noise.amplitudes)
    basis = np.eye(noise.n_coordinates)
    whitened = np.column_stack(
        [
            _embed(noise.coordinates_to_field(basis[j])) * sqrt_q[j]
            for j in range(noise.n_coordinates)
        ]
    )
    dt = np.diff(times)
    velocities = np.column_stack(
        [
            _embed(g_path[i + 1] - g_path[i]) / dt[i]
            for i in range(len(dt))
        ]
    )
    solution = linalg.lstsq(whitened, velocities)[0]
    residual = np.linalg.norm(velocities - whitened @ solution, axis=0)
    scale = np.linalg.norm(velocities, axis=0)
    gains = np.array(
        [noise.gain(g_path[i]) for i in range(len(dt))], dtype=np.float64
    )
    z = (solution / gains).T
    h_dot = z * sqrt_q
    if np.any(residual > RESIDUAL_TOL * scale):
        logging.info(
            "Path leaves the range of the noise (residual {:.3g})".format(
                float(np.max(residual))
            )
        )
        cost = math.inf
    else:
        cost = 0.5 * float(np.sum(np.sum(z**2, axis=1) * dt))
    return ControlPath(times, h_dot, cost, noise.amplitudes)


@dataclass
class ConsistencyReport:
    tube_radius: float
    rate: float
    rate_check: float
    estimates: List[LdpEstimate]
    gaps: Dict[float, float]
    gap_shrinking: Optional[bool]
    suggestions: List[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return sns_utils.plain(
            {
                "tube_radius": self.tube_radius,
                "rate_inf": self.rate,
                "rate_check": self.rate_check,
                "estimates": [
                    {
                        "epsilon": e.epsilon,
                        "hits": e.hits,
                        "n": e.n_samples,
                        "neg_eps_log_p": -e.eps_log_p,
                    }
                    for e in self.estimates
                ],
                "gaps": self.gaps,
                "gap_shrinking": self.gap_shrinking,
                "suggestions": self.suggestions,
            }
        )


def tube_rate(
    noise: NoiseModel, velocity: SpectralVelocity, tube_radius: float
) -> tuple:
    """Cheapest straight path xi + t w with sup_t |t (w - velocity)|_H below
    the tube radius.

    Minimising 1/2 sum w_j^2 / q_j subject to |w - velocity|_H = radius gives
    w_j = lam q_j c_j / (1 + lam q_j) with the multiplier lam fixed by the
    constraint. Returns (cost, w as a field), cost inf when no such path
    exists.
    """
    c = noise.field_to_coordinates(velocity)
    q = noise.amplitudes
    outside = max(0.0, velocity.h_norm_sq() - float(np.sum(c**2)))
    slack = tube_radius**2 - outside - float(np.sum(c[q == 0] ** 2))
    if slack <= 0:
        return math.inf, None
    if float(np.sum(c**2)) <= tube_radius**2 - outside:
        return 0.0, SpectralVelocity.zeros(velocity.grid)
    active = q > 0
    c_active, q_active = c[active], q[active]

    def excess(lam: float) -> float:
        shrunk = c_active**2 / (1.0 + lam * q_active) ** 2
        return float(np.sum(shrunk)) - slack

    upper = 1.0 / float(np.min(q_active))
    while excess(upper) > 0:
        upper *= 2.0
    lam = optimize.brentq(excess, 0.0, upper, xtol=1e-14, rtol=1e-14)
    w = np.zeros_like(c)
    w[active] = lam * q_active * c_active / (1.0 + lam * q_active)
    cost = 0.5 * float(np.sum(w[active] ** 2 / q_active))
    return cost, noise.coordinates_to_field(w)


def _tube_task(task: tuple) -> float:
    """sup_t |v_eps(t) - (xi + t velocity)|_H for one diffusion-only path."""
    cfg, xi, velocity, key = task
    stream = RandomStream(cfg.seed, *key)
    state = SimState(0.0, xi)
    sup = 0.0
    try:
        for step_index in range(cfg.n_steps):
            dW = sample_increment(cfg.noise, cfg.dt, stream, step_index)
            state = step_diffusion_only(state, cfg, dW)
            target = xi + velocity.scaled(state.t)
            sup = max(sup, (state.u - target).h_norm_sq() ** 0.5)
    except BlowUpError:
        return math.inf
    return sup


def ldp_consistency_report(
    cfg: SimConfig,
    velocity: SpectralVelocity,
    tube_radius: float,
    epsilons: Sequence[float],
    n_samples: int,
    workers: int = 1,
) -> ConsistencyReport:
    """Compare -eps log P(sup_t |v_eps(t) - g(t)|_H < radius) for the
    straight path g(t) = xi + t velocity with the infimum of the rate
    function over the straight paths inside the tube."""
    if cfg.noise.kind != ADDITIVE:
        raise ValueError(
            "The consistency report needs an additive noise model"
        )
    if not tube_radius > 0:
        raise ValueError(f"tube_radius must be > 0, got {tube_radius}")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    xi = cfg.initial.build(cfg.grid)
    rate, best = tube_rate(cfg.noise, velocity, tube_radius)
    rate_check = math.inf
    if best is not None:
        times = np.linspace(0.0, 1.0, 11)
        rate_check = rate_function_eval(
            xi, straight_path(xi, best, times), cfg.noise, times
        ).cost

    estimates, gaps, suggestions = [], {}, []
    for epsilon in sorted(epsilons, reverse=True):
        run = _on_unit_interval(cfg, epsilon)
        tasks = [(run, xi, velocity, (TUBE, k)) for k in range(n_samples)]
        sups = sns_utils.map_ordered(_tube_task, tasks, workers)
        estimate = _count(epsilon, "tube", [tube_radius], sups, above=False)[0]
        estimates.append(estimate)
        if estimate.hits < MIN_TUBE_HITS:
            suggestions.append(
                f"only {estimate.hits} tube hits at eps={epsilon:g}; rerun "
                f"with a wider tube or more samples"
            )
        if estimate.hits and not math.isinf(rate):
            gaps[epsilon] = -estimate.eps_log_p - rate
    for suggestion in suggestions:
        logging.warning(suggestion)

    shrinking = None
    if len(gaps) >= 2:
        ordered = [abs(gaps[e]) for e in sorted(gaps, reverse=True)]
        shrinking = all(b <= a for a, b in zip(ordered, ordered[1:]))
    return ConsistencyReport(
        tube_radius, rate, rate_check, estimates, gaps, shrinking, suggestions
    )
