"""Ledgers of every functional appearing in the a priori estimates, and the
ensemble statistics built on them."""

import logging
import math
from dataclasses import dataclass, field
from typing import (
    TYPE_CHECKING,
    Dict,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Union,
)

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from damped_sns import sns_utils
from damped_sns.fields import (
    SpectralVelocity,
    compute_norms,
    gradient_tensor,
    grad_magnitude_power_field,
    inverse_transform,
    norms_with_fields,
)
from damped_sns.gates import check_moment_order, check_strong_mode
from damped_sns.noise import WienerIncrement, diffusion_apply, hs_norm_sq

if TYPE_CHECKING:
    from damped_sns.integrator import SimConfig, SimState, TwinState

LEDGER_COLUMNS = (
    "t",
    "h2",
    "v2",
    "lp",
    "g_h2",
    "g_v2",
    "mixed",
    "sqrtpow",
    "hs2",
    "stoch_acc",
)
TWIN_COLUMNS = ("t", "r", "diff_h2", "weighted")

MIN_ENSEMBLE = 30
LADDER_DRIFT = 2.0


class IncompleteTrajectoryError(ValueError):
    """A ledger does not cover the time window a functional needs."""


@dataclass(frozen=True)
class LedgerRow:
    t: float
    h_norm_sq: float
    v_norm_sq: float
    lp_beta_norm: float
    grad_h_norm_sq: float
    grad_v_norm_sq: float
    mixed_dissipation: float
    sqrtpow_dissipation: float
    hs_norm_sq: float
    stoch_integral_accum: float

    def values(self) -> tuple:
        return (
            self.t,
            self.h_norm_sq,
            self.v_norm_sq,
            self.lp_beta_norm,
            self.grad_h_norm_sq,
            self.grad_v_norm_sq,
            self.mixed_dissipation,
            self.sqrtpow_dissipation,
            self.hs_norm_sq,
            self.stoch_integral_accum,
        )


@dataclass(frozen=True)
class TwinRow:
    t: float
    r_accum: float
    difference_sq: float
    weighted: float

    def values(self) -> tuple:
        return (self.t, self.r_accum, self.difference_sq, self.weighted)


class _Ledger:
    """Append-only table of rows with strictly increasing time."""

    columns: tuple = ()
    row_type: type = tuple
    nonnegative: tuple = ()

    def __init__(self, rows: Optional[Sequence] = None) -> None:
        self._rows: List = []
        for row in rows or []:
            self.append(row)

    def append(self, row) -> None:
        values = row.values()
        if self._rows and not values[0] > self._rows[-1].values()[0]:
            raise ValueError(
                f"Ledger time must increase strictly, got {values[0]} after "
                f"{self._rows[-1].values()[0]}"
            )
        for name, value in zip(self.columns, values):
            if name in self.nonnegative and value < 0:
                raise ValueError(f"Ledger entry {name}={value} is negative")
        self._rows.append(row)

    def __len__(self) -> int:
        return len(self._rows)

    def __iter__(self) -> Iterator:
        return iter(self._rows)

    def __getitem__(self, index: int):
        return self._rows[index]

    def column(self, name: str) -> np.ndarray:
        position = self.columns.index(name)
        return np.array([row.values()[position] for row in self._rows])

    @property
    def times(self) -> np.ndarray:
        return self.column("t")

    def to_csv(self, path: str) -> str:
        logging.info("Writing {} rows to {}".format(len(self), path))
        return sns_utils.write_csv(
            path, self.columns, (row.values() for row in self._rows)
        )

    @classmethod
    def from_csv(cls, path: str) -> "_Ledger":
        header, rows = sns_utils.read_csv(path)
        if tuple(header) != cls.columns:
            raise ValueError(
                f"Unexpected ledger header {header}, expected {cls.columns}"
            )
        return cls([cls.row_type(*(float(v) for v in row)) for row in rows])


class EnergyLedger(_Ledger):
    columns = LEDGER_COLUMNS
    row_type = LedgerRow
    nonnegative = LEDGER_COLUMNS[1:-1]


class TwinLedger(_Ledger):
    columns = TWIN_COLUMNS
    row_type = TwinRow
    nonnegative = TWIN_COLUMNS[1:]


# ensembles keyed by resolution, or a single ensemble
Ladder = Union[Mapping[int, Sequence[EnergyLedger]], Sequence[EnergyLedger]]


def ledger_row(
    state: "SimState",
    cfg: "SimConfig",
    stoch_integral_accum: float = 0.0,
    time_scale: float = 1.0,
) -> LedgerRow:
    """All ledger entries for one state.

    The mixed dissipation integral of |u|^(beta-1) |grad u|^2 is computed by
    physical-space quadrature with spectral gradients.
    """
    u = state.u
    beta = cfg.damping.beta
    physical = inverse_transform(u)
    grad = gradient_tensor(u)
    norms = norms_with_fields(u, physical, grad, beta)
    weight = physical.magnitude() ** (beta - 1.0)
    mixed = physical.integrate(weight * np.sum(grad**2, axis=(0, 1)))
    return LedgerRow(
        t=state.t,
        h_norm_sq=norms.h_norm_sq,
        v_norm_sq=norms.v_norm_sq,
        lp_beta_norm=norms.lp_norm,
        grad_h_norm_sq=norms.grad_h_norm_sq,
        grad_v_norm_sq=norms.grad_v_norm_sq,
        mixed_dissipation=mixed,
        sqrtpow_dissipation=grad_magnitude_power_field(physical, beta),
        hs_norm_sq=hs_norm_sq(cfg.noise, time_scale * state.t, u),
        stoch_integral_accum=stoch_integral_accum,
    )


def twin_row(tw: "TwinState") -> TwinRow:
    return TwinRow(
        t=tw.t,
        r_accum=tw.r_accum,
        difference_sq=tw.difference_sq(),
        weighted=tw.weighted_difference(),
    )


def step_energy_residual(
    u: SpectralVelocity,
    u_next: SpectralVelocity,
    cfg: "SimConfig",
    dW: WienerIncrement,
    t: float = 0.0,
) -> float:
    """Residual of the discrete Ito energy balance of one plain step:

    |u+|^2 - |u|^2 + 2 dt mu ||u+||^2 + 2 dt alpha |u|_{beta+1}^{beta+1}
        - 2 (u, G dW) - |G dW|^2
    """
    noise = diffusion_apply(cfg.noise, t, u, dW)
    lp = compute_norms(u, cfg.damping.beta).lp_norm
    return (
        u_next.h_norm_sq()
        - u.h_norm_sq()
        + 2.0 * cfg.dt * cfg.mu * u_next.v_norm_sq()
        + 2.0 * cfg.dt * cfg.damping.alpha * lp
        - 2.0 * u.inner(noise)
        - noise.h_norm_sq()
    )


@dataclass(frozen=True)
class Statistic:
    mean: float
    ci_low: float
    ci_high: float
    n: int


def bootstrap_mean(
    samples: np.ndarray, n_boot: int = 1000, seed: int = 0
) -> Statistic:
    """Sample mean with a percentile bootstrap 95% interval."""
    samples = np.asarray(samples, dtype=np.float64)
    n = len(samples)
    rng = np.random.default_rng(seed)
    draws = samples[rng.integers(0, n, size=(n_boot, n))].mean(axis=1)
    low, high = np.percentile(draws, [2.5, 97.5])
    return Statistic(float(samples.mean()), float(low), float(high), n)


def _as_ladder(ladder: Ladder) -> Dict[int, Sequence[EnergyLedger]]:
    if isinstance(ladder, Mapping):
        return dict(ladder)
    return {0: ladder}


def _ladder_ratio(means: Sequence[float]) -> float:
    values = np.abs(np.asarray(means, dtype=np.float64))
    if np.all(values == 0):
        return 1.0
    if np.any(values == 0):
        return math.inf
    return float(values.max() / values.min())


@dataclass
class MomentReport:
    p: float
    eta: float
    rungs: Dict[int, Dict[str, Statistic]]
    ratios: Dict[str, float]
    stable: bool

    def as_dict(self) -> dict:
        return sns_utils.plain(
            {
                "p": self.p,
                "eta": self.eta,
                "rungs": {
                    n: {k: vars(s) for k, s in stats.items()}
                    for n, stats in self.rungs.items()
                },
                "ratios": self.ratios,
                "stable": self.stable,
            }
        )


def moment_estimates(
    ladder: Ladder,
    p: float,
    eta: float,
    n_boot: int = 1000,
    seed: int = 0,
) -> MomentReport:
    """Monte Carlo estimates of E sup|u|_H^p, E int |u|_H^(p-2) ||u||^2 and
    E int |u|_{beta+1}^{beta+1} per resolution, with the stability verdict
    across the resolution ladder (max/min of each mean within 2x).
    """
    check_moment_order(p, eta)
    rungs: Dict[int, Dict[str, Statistic]] = {}
    for n, ledgers in sorted(_as_ladder(ladder).items()):
        if len(ledgers) < MIN_ENSEMBLE:
            raise ValueError(
                f"Ensemble of {len(ledgers)} trajectories at n={n} is too "
                f"small, need at least {MIN_ENSEMBLE}"
            )
        sup_h, int_v, int_lp = [], [], []
        for ledger in ledgers:
            t = ledger.times
            h = ledger.column("h2")
            sup_h.append(float(np.max(h)) ** (p / 2.0))
            int_v.append(
                trapezoid(h ** ((p - 2.0) / 2.0) * ledger.column("v2"), t)
            )
            int_lp.append(trapezoid(ledger.column("lp"), t))
        rungs[n] = {
            "sup_h_p": bootstrap_mean(np.array(sup_h), n_boot, seed),
            "int_h_p2_v": bootstrap_mean(np.array(int_v), n_boot, seed),
            "int_lp": bootstrap_mean(np.array(int_lp), n_boot, seed),
        }
    ratios = {
        key: _ladder_ratio([stats[key].mean for stats in rungs.values()])
        for key in ("sup_h_p", "int_h_p2_v", "int_lp")
    }
    stable = all(r <= LADDER_DRIFT for r in ratios.values())
    logging.info("Moment estimates p={:g}: ladder ratios {}".format(p, ratios))
    return MomentReport(p, eta, rungs, ratios, stable)


@dataclass
class GradientReport:
    rungs: Dict[int, Dict[str, float]]
    ratio: float
    stable: bool

    def as_dict(self) -> dict:
        return sns_utils.plain(
            {"rungs": self.rungs, "ratio": self.ratio, "stable": self.stable}
        )


def gradient_functional(ledger: EnergyLedger) -> float:
    """sup|grad u|^2 + int ||grad u||^2 + int int |u|^(beta-1)|grad u|^2
    + int |grad |u|^((beta+1)/2)|^2 for one trajectory."""
    t = ledger.times
    return (
        float(np.max(ledger.column("g_h2")))
        + trapezoid(ledger.column("g_v2"), t)
        + trapezoid(ledger.column("mixed"), t)
        + trapezoid(ledger.column("sqrtpow"), t)
    )


def gradient_bound_check(
    ladder: Ladder,
    cfg: "SimConfig",
) -> GradientReport:
    """Implied constant C = E[gradient functional] / (E|grad u0|^2 + 1) per
    resolution and its drift across the ladder. Refused outside the strong
    solution regime."""
    check_strong_mode(cfg.damping)
    rungs: Dict[int, Dict[str, float]] = {}
    for n, ledgers in sorted(_as_ladder(ladder).items()):
        if not ledgers:
            raise ValueError(f"No trajectories at n={n}")
        lhs = float(np.mean([gradient_functional(ld) for ld in ledgers]))
        initial = float(np.mean([ld[0].grad_h_norm_sq for ld in ledgers]))
        rungs[n] = {
            "lhs": lhs,
            "initial_grad_sq": initial,
            "implied_C": lhs / (initial + 1.0),
        }
    ratio = _ladder_ratio([r["implied_C"] for r in rungs.values()])
    logging.info("Gradient bound: implied C ladder ratio {:.3g}".format(ratio))
    return GradientReport(rungs, ratio, ratio <= LADDER_DRIFT)


def energy_ball_functional(ledger: EnergyLedger, epsilon: float) -> float:
    """sup_{t<=1} |u(t)|_H^2 + 2 eps int_0^1 ||u(t)||^2 dt."""
    t = ledger.times
    if len(t) == 0 or t[0] > 1e-12 or t[-1] < 1.0 - 1e-9:
        raise IncompleteTrajectoryError(
            "The energy-ball functional needs a ledger covering [0, 1]"
        )
    window = t <= 1.0 + 1e-9
    return float(np.max(ledger.column("h2")[window])) + 2.0 * epsilon * float(
        trapezoid(ledger.column("v2")[window], t[window])
    )


@dataclass(frozen=True)
class ExitRecord:
    tau: float
    threshold_M: float
    criterion: Optional[str]

    @property
    def exited(self) -> bool:
        return not math.isinf(self.tau)


RESCALED_CRITERIA = "rescaled"
DIFFUSION_CRITERIA = "diffusion"


def exit_series(
    ledger: EnergyLedger, epsilon: float, criteria: str = RESCALED_CRITERIA
) -> Dict[str, np.ndarray]:
    """The functionals whose first passage above M defines the exit time."""
    if criteria == RESCALED_CRITERIA:
        t = ledger.times
        v = ledger.column("v2")
        return {
            "energy_integral": epsilon
            * cumulative_trapezoid(v, t, initial=0.0),
            "h_norm": ledger.column("h2"),
            "v_norm": v,
        }
    if criteria == DIFFUSION_CRITERIA:
        return {"v_norm": ledger.column("v2"), "lp_norm": ledger.column("lp")}
    raise ValueError(f"Unknown exit criteria {criteria!r}")


def detect_exit(
    ledger: EnergyLedger,
    M: float,
    epsilon: float = 1.0,
    criteria: str = RESCALED_CRITERIA,
) -> ExitRecord:
    """First time any criterion exceeds M, linearly interpolated between
    ledger rows; tau = inf when no criterion does."""
    if M < 0:
        raise ValueError(f"Threshold M must be >= 0, got {M}")
    t = ledger.times
    series = exit_series(ledger, epsilon, criteria)
    first_index = len(t)
    for values in series.values():
        above = np.nonzero(values > M)[0]
        if len(above):
            first_index = min(first_index, int(above[0]))
    if first_index == len(t):
        return ExitRecord(math.inf, M, None)
    if first_index == 0:
        name = next(k for k, v in series.items() if v[0] > M)
        return ExitRecord(float(t[0]), M, name)
    i = first_index
    best_tau, best_name = math.inf, None
    for name, values in series.items():
        if values[i] > M:
            fraction = (M - values[i - 1]) / (values[i] - values[i - 1])
            tau = float(t[i - 1] + fraction * (t[i] - t[i - 1]))
            if tau < best_tau:
                best_tau, best_name = tau, name
    return ExitRecord(best_tau, M, best_name)


@dataclass
class TwinReport:
    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    initial_mean: float
    max_weighted: float
    nonincreasing: bool
    bound_holds: Optional[bool]
    series: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def as_dict(self) -> dict:
        return sns_utils.plain(
            {
                "initial_mean": self.initial_mean,
                "final_mean": float(self.mean[-1]),
                "final_stderr": float(self.stderr[-1]),
                "max_weighted": self.max_weighted,
                "nonincreasing": self.nonincreasing,
                "bound_holds": self.bound_holds,
                "n_pairs": int(self.series.shape[0]),
            }
        )


def weighted_twin_difference(
    ledgers: Sequence[TwinLedger], lipschitz_ok: bool = True
) -> TwinReport:
    """Ensemble of e^(-r(t)) |U(t)|_H^2 series.

    With ``lipschitz_ok`` the report checks the supermartingale bound
    mean(T) <= |U(0)|^2 (1 + 3 stderr(T)); ``nonincreasing`` tests every
    consecutive pair of ensemble means within 3 standard errors.
    """
    if not ledgers:
        raise ValueError("No twin ledgers given")
    times = ledgers[0].times
    for ledger in ledgers[1:]:
        if not np.array_equal(ledger.times, times):
            raise ValueError("Twin ledgers use different time grids")
    series = np.array([ledger.column("weighted") for ledger in ledgers])
    mean = series.mean(axis=0)
    n = series.shape[0]
    stderr = (
        series.std(axis=0, ddof=1) / math.sqrt(n)
        if n > 1
        else np.zeros_like(mean)
    )
    initial = float(mean[0])
    nonincreasing = bool(np.all(mean[1:] <= mean[:-1] + 3.0 * stderr[1:]))
    bound = None
    if lipschitz_ok:
        bound = bool(mean[-1] <= initial * (1.0 + 3.0 * stderr[-1]))
        if not bound:
            logging.warning(
                "Weighted twin difference grew: {:.3g} > {:.3g}".format(
                    mean[-1], initial
                )
            )
    return TwinReport(
        times=times,
        mean=mean,
        stderr=stderr,
        initial_mean=initial,
        max_weighted=float(series.max()),
        nonincreasing=nonincreasing,
        bound_holds=bound,
        series=series,
    )
