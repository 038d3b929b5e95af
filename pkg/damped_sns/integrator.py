"""Time stepping of the Galerkin system.

One step of the semi-implicit scheme reads

    u+ = (I + dt mu |kappa|^2)^-1 P[u - dt (B(u) + g(u) - f) + G(u) dW]

with the Stokes part implicit and convection, damping and noise explicit.
The tamed variant divides g(u) pointwise by 1 + dt alpha |u|^(beta-1).
The rescaled system multiplies the drift by epsilon and the noise by
sqrt(epsilon); the diffusion-only system drops the drift altogether.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Tuple

import numpy as np

from damped_sns import diagnostics
from damped_sns.fields import (
    GridSpec,
    SpectralVelocity,
    project_array,
    random_solenoidal,
    read_snapshot,
    regrid,
)
from damped_sns.gates import check_strong_mode
from damped_sns.noise import (
    NoiseModel,
    RandomStream,
    WienerIncrement,
    diffusion_apply,
    sample_increment,
)
from damped_sns.operators import (
    DampingParams,
    convective_term,
    damping_projected,
)

SEMI_IMPLICIT = "semi-implicit"
TAMED = "tamed-semi-implicit"
SCHEMES = (SEMI_IMPLICIT, TAMED)

PLAIN = "plain"
RESCALED = "rescaled"
DIFFUSION = "diffusion"
MODES = (PLAIN, RESCALED, DIFFUSION)

PRESETS = ("zero", "shear", "random-smooth", "snapshot")


class BlowUpError(ArithmeticError):
    """A step produced non-finite coefficients.

    Attributes:
        |   state: the last finite state
        |   t: time at which the step was attempted
    """

    def __init__(self, state: "SimState", t: float) -> None:
        super().__init__(
            f"Blow-up at t={t:.6g} (step {state.step_index + 1}); "
            f"last finite |u|_H^2 = {state.u.h_norm_sq():.6g}"
        )
        self.state = state
        self.t = t


@dataclass(frozen=True)
class InitialData:
    """Named initial condition.

    Args:
        |   preset: 'zero', 'shear' (u = (A sin(2 pi y / L), 0, 0)),
        |       'random-smooth' (random field with ||u||^2 = v_norm_sq)
        |       or 'snapshot' (read from ``path``)
        |   amplitude: shear amplitude A
        |   v_norm_sq: H^1 seminorm of the random-smooth preset
        |   decay: spectral decay of the random-smooth preset
        |   seed: seed of the random-smooth preset
        |   path: snapshot path
    """

    preset: str = "zero"
    amplitude: float = 1.0
    v_norm_sq: float = 1.0
    decay: float = 2.0
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(
                f"Unknown initial preset {self.preset!r}, expected one of "
                f"{PRESETS}"
            )
        if self.preset == "snapshot" and not self.path:
            raise ValueError("The snapshot preset needs a path")

    def build(self, grid: GridSpec) -> SpectralVelocity:
        if self.preset == "zero":
            return SpectralVelocity.zeros(grid)
        if self.preset == "shear":
            return shear_field(grid, self.amplitude)
        if self.preset == "random-smooth":
            rng = RandomStream(self.seed).generator()
            return random_solenoidal(
                grid, rng, decay=self.decay, v_norm_sq=self.v_norm_sq
            )
        snapshot = read_snapshot(str(self.path), grid.dealias_fraction)
        return regrid(snapshot, grid)


def shear_field(grid: GridSpec, amplitude: float) -> SpectralVelocity:
    """u = (A sin(2 pi y / L), 0, 0)."""
    coefficients = np.zeros((3,) + grid.shape, dtype=np.complex128)
    coefficients[0, 0, 1, 0] = -0.5j * amplitude
    coefficients[0, 0, -1, 0] = 0.5j * amplitude
    return SpectralVelocity(coefficients, grid)


@dataclass(frozen=True, eq=False)
class ConstantForcing:
    """Time-independent body force, usable as ``SimConfig.forcing``."""

    field: SpectralVelocity

    def __call__(self, t: float) -> SpectralVelocity:
        return self.field


@dataclass(frozen=True, eq=False)
class SimConfig:
    grid: GridSpec
    damping: DampingParams
    mu: float
    noise: NoiseModel
    dt: float
    t_end: float
    scheme: str = SEMI_IMPLICIT
    epsilon: Optional[float] = None
    seed: int = 0
    forcing: Optional[Callable[[float], SpectralVelocity]] = None
    initial: InitialData = field(default_factory=InitialData)
    strong_mode: bool = False

    def __post_init__(self) -> None:
        if not self.mu > 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.t_end < 0:
            raise ValueError(f"t_end must be >= 0, got {self.t_end}")
        if 0 < self.t_end < self.dt:
            raise ValueError("dt must not exceed t_end")
        steps = self.t_end / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(steps, 1.0):
            raise ValueError(
                f"t_end={self.t_end} is not a whole number of steps of "
                f"dt={self.dt}"
            )
        if self.scheme not in SCHEMES:
            raise ValueError(
                f"Unknown scheme {self.scheme!r}, expected one of {SCHEMES}"
            )
        if self.epsilon is not None and not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.noise.grid != self.grid:
            raise ValueError(
                "Noise model and configuration use different grids"
            )
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.strong_mode:
            check_strong_mode(self.damping)

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def stability_ratio(self) -> float:
        """dt mu max|kappa|^2 over the retained modes."""
        kappa_sq = self.grid.kappa_sq[self.grid.retained]
        return self.dt * self.mu * float(np.max(kappa_sq))

    def with_grid(self, grid: GridSpec) -> "SimConfig":
        forcing = self.forcing
        if isinstance(forcing, ConstantForcing):
            forcing = ConstantForcing(regrid(forcing.field, grid))
        return replace(
            self, grid=grid, noise=self.noise.on_grid(grid), forcing=forcing
        )


@dataclass(frozen=True)
class SimState:
    t: float
    u: SpectralVelocity
    step_index: int = 0


@dataclass(frozen=True)
class TwinState:
    """Two copies driven by the same noise, with r(t) = a int ||u2||^4."""

    t: float
    u1: SpectralVelocity
    u2: SpectralVelocity
    r_accum: float = 0.0
    a_coeff: float = 1.0
    step_index: int = 0

    def difference_sq(self) -> float:
        return (self.u1 - self.u2).h_norm_sq()

    def weighted_difference(self) -> float:
        """e^(-r(t)) |u1 - u2|_H^2."""
        return math.exp(-self.r_accum) * self.difference_sq()


@dataclass
class TrajectorySummary:
    final_state: SimState
    n_steps: int
    stoch_integral_accum: float = 0.0
    blew_up: bool = False
    blow_up_time: Optional[float] = None
    message: str = ""


def _advance(
    state: SimState,
    cfg: SimConfig,
    dW: WienerIncrement,
    drift_scale: float,
    noise_scale: float,
    time_scale: float,
    drift: bool = True,
) -> Tuple[SimState, SpectralVelocity]:
    """One step; returns the new state and the noise term G(u) dW used."""
    u = state.u
    grid = u.grid
    rhs = np.array(u.coefficients)
    if drift:
        dt = cfg.dt * drift_scale
        taming = dt if cfg.scheme == TAMED else None
        tendency = convective_term(u).coefficients + damping_projected(
            u, cfg.damping, taming_dt=taming
        ).coefficients
        if cfg.forcing is not None:
            forcing = cfg.forcing(time_scale * state.t)
            tendency = tendency - forcing.coefficients
        rhs -= dt * tendency
    noise = diffusion_apply(cfg.noise, time_scale * state.t, u, dW)
    noise = noise.scaled(noise_scale)
    rhs += noise.coefficients
    updated = project_array(rhs, grid)
    if drift:
        stokes = 1.0 + cfg.dt * drift_scale * cfg.mu * grid.kappa_sq
        updated = updated / stokes
    step_index = state.step_index + 1
    t = step_index * cfg.dt
    if not np.all(np.isfinite(updated)):
        logging.warning("Non-finite state at t={:.6g}".format(t))
        raise BlowUpError(state, t)
    return SimState(t, SpectralVelocity(updated, grid), step_index), noise


def step(state: SimState, cfg: SimConfig, dW: WienerIncrement) -> SimState:
    """One step of the Galerkin system."""
    return _advance(state, cfg, dW, 1.0, 1.0, 1.0)[0]


def _epsilon(cfg: SimConfig) -> float:
    if cfg.epsilon is None:
        raise ValueError("The rescaled systems need epsilon in the config")
    return cfg.epsilon


def step_rescaled(
    state: SimState, cfg: SimConfig, dW: WienerIncrement
) -> SimState:
    """One step of the small-time system u_eps(t) = u(eps t): drift scaled
    by eps, noise by sqrt(eps), G evaluated at time eps t."""
    eps = _epsilon(cfg)
    return _advance(state, cfg, dW, eps, math.sqrt(eps), eps)[0]


def step_diffusion_only(
    state: SimState, cfg: SimConfig, dW: WienerIncrement
) -> SimState:
    """v+ = P[v + sqrt(eps) G(eps t, v) dW]."""
    eps = _epsilon(cfg)
    return _advance(state, cfg, dW, eps, math.sqrt(eps), eps, drift=False)[0]


def _mode_scales(
    cfg: SimConfig, mode: str
) -> Tuple[float, float, float, bool]:
    if mode == PLAIN:
        return 1.0, 1.0, 1.0, True
    eps = _epsilon(cfg)
    if mode == RESCALED:
        return eps, math.sqrt(eps), eps, True
    if mode == DIFFUSION:
        return eps, math.sqrt(eps), eps, False
    raise ValueError(f"Unknown mode {mode!r}, expected one of {MODES}")


def integrate(
    cfg: SimConfig,
    stream: RandomStream,
    ledger_sink: Optional[Callable[["diagnostics.LedgerRow"], None]] = None,
    mode: str = PLAIN,
    initial: Optional[SpectralVelocity] = None,
    abort_on_blow_up: bool = True,
) -> TrajectorySummary:
    """Run from t = 0 to t_end, streaming one ledger row per step.

    The noise for step s is drawn from ``stream`` at counter s. On blow-up
    the error propagates unless ``abort_on_blow_up`` is False, in which case
    the summary carries the flag, time stamp and last finite state.
    """
    drift_scale, noise_scale, time_scale, drift = _mode_scales(cfg, mode)
    u0 = initial if initial is not None else cfg.initial.build(cfg.grid)
    state = SimState(0.0, u0, 0)
    stoch = 0.0
    if ledger_sink is not None:
        ledger_sink(diagnostics.ledger_row(state, cfg, stoch, time_scale))
    for _ in range(cfg.n_steps):
        dW = sample_increment(cfg.noise, cfg.dt, stream, state.step_index)
        try:
            new_state, noise = _advance(
                state, cfg, dW, drift_scale, noise_scale, time_scale, drift
            )
        except BlowUpError as err:
            if abort_on_blow_up:
                raise
            return TrajectorySummary(
                err.state, err.state.step_index, stoch, True, err.t, str(err)
            )
        stoch += state.u.inner(noise)
        state = new_state
        if ledger_sink is not None:
            ledger_sink(diagnostics.ledger_row(state, cfg, stoch, time_scale))
    return TrajectorySummary(state, cfg.n_steps, stoch)


def twin_step(tw: TwinState, cfg: SimConfig, dW: WienerIncrement) -> TwinState:
    """Advance both copies with the same increment; r accumulates
    a ||u2||^4 dt at the left end point."""
    first = step(SimState(tw.t, tw.u1, tw.step_index), cfg, dW)
    second = step(SimState(tw.t, tw.u2, tw.step_index), cfg, dW)
    r_accum = tw.r_accum + tw.a_coeff * tw.u2.v_norm_sq() ** 2 * cfg.dt
    return TwinState(
        first.t, first.u, second.u, r_accum, tw.a_coeff, first.step_index
    )


def twin_integrate(
    cfg: SimConfig,
    stream: RandomStream,
    u1: SpectralVelocity,
    u2: SpectralVelocity,
    a_coeff: float,
    ledger_sink: Optional[Callable[["diagnostics.TwinRow"], None]] = None,
) -> TwinState:
    if a_coeff < 0:
        raise ValueError(f"a_coeff must be >= 0, got {a_coeff}")
    tw = TwinState(0.0, u1, u2, 0.0, a_coeff, 0)
    if ledger_sink is not None:
        ledger_sink(diagnostics.twin_row(tw))
    for _ in range(cfg.n_steps):
        dW = sample_increment(cfg.noise, cfg.dt, stream, tw.step_index)
        tw = twin_step(tw, cfg, dW)
        if ledger_sink is not None:
            ledger_sink(diagnostics.twin_row(tw))
    return tw


def record_trajectory(
    cfg: SimConfig,
    stream: RandomStream,
    mode: str = PLAIN,
    initial: Optional[SpectralVelocity] = None,
) -> Tuple["diagnostics.EnergyLedger", TrajectorySummary]:
    """Integrate without aborting on blow-up and keep every ledger row."""
    ledger = diagnostics.EnergyLedger()
    summary = integrate(
        cfg, stream, ledger.append, mode, initial, abort_on_blow_up=False
    )
    if summary.blew_up:
        logging.warning(summary.message)
    return ledger, summary
