"""Finite-mode Q-Wiener forcing and the diffusion coefficient G(t, u).

The noise lives on a set of forced Hermitian wavevector pairs. Each pair
carries two polarizations orthogonal to its wavevector and a cosine and a sine
part, giving four real coordinates per pair. The coordinates are H-orthonormal
directions phi_j; W(t) = sum_j W_j(t) phi_j with Var W_j(t) = q_j t, so Q is
diagonal with eigenvalues q_j = sigma^2 |kappa_j|^-gamma and trace sum q_j.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, List, Optional

import numpy as np
from scipy import optimize

from damped_sns.fields import (
    GridSpec,
    SpectralVelocity,
    project_array,
    random_solenoidal,
)

ADDITIVE = "additive"
MULTIPLICATIVE = "multiplicative"
NOISE_KINDS = (ADDITIVE, MULTIPLICATIVE)

UNIQUENESS_CONDITION = "L<2"
MOMENT_ORDER_CONDITION = "p∈[2, 2+η/(2−η)) if η∈(0,2)"

Sampler = Callable[[np.random.Generator], SpectralVelocity]


class RandomStream:
    """Counter-based Gaussian stream keyed by (seed, *key).

    The generator for a step is Philox with the stream key and the step index
    in the high counter word, so draws depend only on (seed, key, step).
    """

    def __init__(self, seed: int, *key: int) -> None:
        if seed < 0 or any(k < 0 for k in key):
            raise ValueError("Seed and stream keys must be nonnegative")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._philox_key = np.random.SeedSequence(
            [self.seed, *self.key]
        ).generate_state(2, dtype=np.uint64)

    def spawn(self, *key: int) -> "RandomStream":
        return RandomStream(self.seed, *self.key, *key)

    def generator(self, step: int = 0) -> np.random.Generator:
        counter = np.array([0, 0, 0, step], dtype=np.uint64)
        return np.random.Generator(
            np.random.Philox(counter=counter, key=self._philox_key)
        )

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, key={self.key})"


@dataclass(frozen=True, eq=False)
class WienerIncrement:
    """Q-Wiener increment in noise coordinates, coordinate j ~ N(0, q_j dt)."""

    values: np.ndarray
    dt: float

    def scaled(self, factor: float) -> "WienerIncrement":
        return WienerIncrement(factor * self.values, factor**2 * self.dt)


@dataclass(frozen=True)
class HypothesisReport:
    L_hat_growth: float
    K_hat_lip: float
    L_grad: float
    K_grad: float
    eta: float
    lambda0: float
    rho: float
    lipschitz_ok_for_uniqueness: bool
    n_samples: int
    failures: List[str] = field(default_factory=list)

    def admissible_p_range(self) -> tuple:
        return admissible_p_range(self.eta)

    def as_dict(self) -> dict:
        low, high = self.admissible_p_range()
        return {
            "L_hat_growth": self.L_hat_growth,
            "K_hat_lip": self.K_hat_lip,
            "L_grad": self.L_grad,
            "K_grad": self.K_grad,
            "eta": self.eta,
            "lambda0": self.lambda0,
            "rho": self.rho,
            "lipschitz_ok_for_uniqueness": self.lipschitz_ok_for_uniqueness,
            "admissible_p": [low, high],
            "n_samples": self.n_samples,
            "failures": list(self.failures),
        }


def admissible_p_range(eta: float) -> tuple:
    """Moment orders allowed by the coercivity constant eta: [2, 2+eta/(2-eta))
    for eta in (0, 2) and [2, inf) at eta = 2."""
    if not 0 < eta <= 2:
        raise ValueError(f"eta must lie in (0, 2], got {eta}")
    if eta == 2:
        return (2.0, math.inf)
    return (2.0, 2.0 + eta / (2.0 - eta))


def polarization_basis(mode: np.ndarray) -> np.ndarray:
    """Two real unit vectors orthogonal to the wavevector and each other."""
    k = mode.astype(np.float64)
    k_hat = k / np.linalg.norm(k)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(k)))] = 1.0
    e1 = np.cross(k_hat, axis)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(k_hat, e1)
    return np.array([e1, e2])


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Trace-class noise on ``n_pairs`` forced wavevector pairs.

    Args:
        |   grid: the grid the noise acts on
        |   kind: 'additive' (G = identity on the forced range) or
        |       'multiplicative' (G(u) = phi(u) times identity, with the
        |       bounded gain phi(u) = (1 + tanh(|u|_H^2 / gain_scale)) / 2)
        |   sigma: base amplitude, q = sigma^2 |kappa|^-gamma
        |   gamma: spectral decay of q
        |   n_pairs: forced pairs taken in Galerkin order
        |   gain_scale: energy scale of the multiplicative gain
    """

    grid: GridSpec
    kind: str = ADDITIVE
    sigma: float = 0.1
    gamma: float = 2.0
    n_pairs: int = 6
    gain_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in NOISE_KINDS:
            raise ValueError(
                f"Unknown noise kind {self.kind!r}, expected one of "
                f"{NOISE_KINDS}"
            )
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.n_pairs < 1:
            raise ValueError("At least one forced mode pair is required")
        if not self.gain_scale > 0:
            raise ValueError("gain_scale must be > 0")
        if 2 * self.n_pairs > self.grid.n_modes:
            raise ValueError(
                f"{self.n_pairs} forced pairs do not fit in the "
                f"{self.grid.n_modes} retained modes"
            )

    def on_grid(self, grid: GridSpec) -> "NoiseModel":
        """The same forcing on another resolution (coordinates coincide)."""
        model = NoiseModel(
            grid,
            self.kind,
            self.sigma,
            self.gamma,
            self.n_pairs,
            self.gain_scale,
        )
        if not np.array_equal(model.forced_pairs, self.forced_pairs):
            raise ValueError("Forced modes differ between the two grids")
        return model

    @cached_property
    def forced_pairs(self) -> np.ndarray:
        """Representative wavevector of each forced pair, (n_pairs, 3)."""
        pairs: List[tuple] = []
        seen = set()
        for mode in self.grid.galerkin_modes:
            key = tuple(int(c) for c in mode)
            if key in seen:
                continue
            partner = tuple(-c for c in key)
            seen.update({key, partner})
            pairs.append(max(key, partner))
            if len(pairs) == self.n_pairs:
                break
        return np.array(pairs, dtype=np.int64)

    @property
    def forced_modes(self) -> np.ndarray:
        return np.concatenate([self.forced_pairs, -self.forced_pairs])

    @property
    def n_coordinates(self) -> int:
        return 4 * self.n_pairs

    @cached_property
    def polarizations(self) -> np.ndarray:
        return np.array([polarization_basis(m) for m in self.forced_pairs])

    @cached_property
    def pair_kappa_sq(self) -> np.ndarray:
        scale = (2.0 * math.pi / self.grid.box_length) ** 2
        return scale * np.sum(self.forced_pairs**2, axis=1).astype(float)

    @cached_property
    def amplitudes(self) -> np.ndarray:
        """q_j per noise coordinate, ordered (pair, polarization, cos/sin)."""
        q_pair = self.sigma**2 * self.pair_kappa_sq ** (-self.gamma / 2.0)
        return np.repeat(q_pair, 4)

    @property
    def trace(self) -> float:
        return float(np.sum(self.amplitudes))

    @property
    def trace_v(self) -> float:
        """sum_j q_j |kappa_j|^2, the V-valued Hilbert-Schmidt constant."""
        kappa_sq = np.repeat(self.pair_kappa_sq, 4)
        return float(np.sum(self.amplitudes * kappa_sq))

    def coordinates_to_field(self, values: np.ndarray) -> SpectralVelocity:
        """sum_j values_j phi_j as a spectral field."""
        w = np.asarray(values, dtype=np.float64).reshape(self.n_pairs, 2, 2)
        z = (w[..., 0] - 1j * w[..., 1]) / math.sqrt(2.0 * self.grid.volume)
        vectors = np.einsum("pa,pai->pi", z, self.polarizations)
        out = np.zeros((3,) + self.grid.shape, dtype=np.complex128)
        out[(slice(None),) + self.grid.index_of(self.forced_pairs)] = vectors.T
        out[(slice(None),) + self.grid.index_of(-self.forced_pairs)] = np.conj(
            vectors.T
        )
        return SpectralVelocity(out, self.grid)

    def field_to_coordinates(self, s: SpectralVelocity) -> np.ndarray:
        """H-inner products (s, phi_j)."""
        index = self.grid.index_of(self.forced_pairs)
        c = s.coefficients[(slice(None),) + index]
        projected = np.einsum("ip,pai->pa", c, self.polarizations)
        root = math.sqrt(2.0 * self.grid.volume)
        parts = np.stack([root * projected.real, -root * projected.imag], -1)
        return parts.reshape(-1)

    def gain(self, u: SpectralVelocity) -> float:
        """Scalar factor of G(u) on the forced range."""
        if self.kind == ADDITIVE:
            return 1.0
        return 0.5 * (1.0 + math.tanh(u.h_norm_sq() / self.gain_scale))

    def gain_lipschitz_bound(self) -> float:
        """Analytic Lipschitz constant of the gain with respect to |u|_H."""
        if self.kind == ADDITIVE:
            return 0.0
        s = self.gain_scale

        def slope(r: float) -> float:
            return -(r / s) / math.cosh(r * r / s) ** 2

        best = optimize.minimize_scalar(
            slope, bounds=(0.0, 4.0 * math.sqrt(s)), method="bounded"
        )
        return float(-best.fun)


def sample_increment(
    model: NoiseModel, dt: float, stream: RandomStream, step: int = 0
) -> WienerIncrement:
    """Independent Gaussian coordinates with variance q_j dt."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    normals = stream.generator(step).standard_normal(model.n_coordinates)
    return WienerIncrement(normals * np.sqrt(model.amplitudes * dt), dt)


def diffusion_apply(
    model: NoiseModel,
    t: float,
    u: SpectralVelocity,
    dW: WienerIncrement,
) -> SpectralVelocity:
    """G(t, u) dW, projected onto the divergence-free Galerkin space."""
    forced = model.coordinates_to_field(dW.values)
    gain = model.gain(u)
    return SpectralVelocity(
        project_array(gain * forced.coefficients, model.grid), model.grid
    )


def hs_norm_sq(model: NoiseModel, t: float, u: SpectralVelocity) -> float:
    """|G(t, u)|^2_{L_Q} = Tr(G Q G*)."""
    return model.gain(u) ** 2 * model.trace


def hs_norm_sq_v(model: NoiseModel, t: float, u: SpectralVelocity) -> float:
    """|G(t, u)|^2_{L_Q^V}, the same trace measured in the V norm."""
    return model.gain(u) ** 2 * model.trace_v


def default_sampler(grid: GridSpec) -> Sampler:
    """Random smooth fields with log-uniform energy between 1e-3 and 1e3."""

    def sample(rng: np.random.Generator) -> SpectralVelocity:
        field = random_solenoidal(grid, rng)
        target = 10.0 ** rng.uniform(-3.0, 3.0)
        return field.scaled(math.sqrt(target / field.h_norm_sq()))

    return sample


def validate_hypotheses(
    model: NoiseModel,
    sampler: Optional[Sampler] = None,
    n_samples: int = 100,
    stream: Optional[RandomStream] = None,
    t: float = 0.0,
) -> HypothesisReport:
    """Empirical growth, Lipschitz and coercivity constants of G.

    Each constant is the maximum of its defining ratio over sampled field
    pairs. A growth ratio that keeps increasing along an amplitude ladder is
    reported as a failure rather than raised.
    """
    if n_samples < 100:
        raise ValueError(f"n_samples must be >= 100, got {n_samples}")
    sampler = sampler or default_sampler(model.grid)
    rng = (stream or RandomStream(0)).generator()

    L_hat = K_hat = L_grad = K_grad = rho = 0.0
    failures: List[str] = []
    for _ in range(n_samples):
        u = sampler(rng)
        v = sampler(rng)
        gu, gv = model.gain(u), model.gain(v)
        hs_u = gu**2 * model.trace
        L_hat = max(L_hat, hs_u / (1.0 + u.h_norm_sq()))
        L_grad = max(L_grad, gu**2 * model.trace_v / (1.0 + u.v_norm_sq()))
        diff = u - v
        if diff.h_norm_sq() > 0:
            K_hat = max(K_hat, (gu - gv) ** 2 * model.trace / diff.h_norm_sq())
            K_grad = max(
                K_grad, (gu - gv) ** 2 * model.trace_v / diff.v_norm_sq()
            )
        # coercivity with eta = 2, lambda0 = 0: rho >= |G(u)|^2
        rho = max(rho, hs_u)

    probe = sampler(rng)
    ladder = []
    for a in (1.0, 1e2, 1e4):
        scaled = probe.scaled(a)
        growth = hs_norm_sq(model, t, scaled) / (1.0 + scaled.h_norm_sq())
        ladder.append(growth)
    if ladder[2] > 1.5 * ladder[1] > 0 and ladder[1] > ladder[0]:
        failures.append(
            "growth ratio |G(u)|^2/(1+|u|^2) increases with amplitude: "
            f"{ladder}"
        )

    report = HypothesisReport(
        L_hat_growth=L_hat,
        K_hat_lip=K_hat,
        L_grad=L_grad,
        K_grad=K_grad,
        eta=2.0,
        lambda0=0.0,
        rho=rho,
        lipschitz_ok_for_uniqueness=K_hat < 2.0,
        n_samples=n_samples,
        failures=failures,
    )
    logging.info(
        "Noise hypotheses: L={:.3g} K={:.3g} L_grad={:.3g} K_grad={:.3g} "
        "rho={:.3g}".format(L_hat, K_hat, L_grad, K_grad, rho)
    )
    for failure in failures:
        logging.warning(failure)
    return report
