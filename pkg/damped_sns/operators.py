"""Deterministic right-hand side: Stokes operator, dealiased convection,
the trilinear form and the damping nonlinearity g(u) = alpha |u|^(beta-1) u.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from damped_sns.fields import (
    PhysicalVelocity,
    SpectralVelocity,
    gradient_tensor,
    inverse_transform,
    project_array,
    to_spectral_array,
)

STRONG_MODE_CONDITION = "β > 3 with any α>0 and α ≥ ½ as β = 3"


@dataclass(frozen=True)
class DampingParams:
    """Damping coefficient alpha > 0 and exponent beta >= 1."""

    alpha: float
    beta: float

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.beta >= 1:
            raise ValueError(f"beta must be >= 1, got {self.beta}")

    def strong_mode_ok(self) -> bool:
        return self.beta > 3 or (self.beta == 3 and self.alpha >= 0.5)


@dataclass(frozen=True, eq=False)
class JacobianField:
    """g'(u(x)) per grid point, shape (n, n, n, 3, 3)."""

    matrices: np.ndarray

    def symmetric_defect(self) -> float:
        return float(
            np.max(np.abs(self.matrices - np.swapaxes(self.matrices, -1, -2)))
        )

    def min_eigenvalue(self) -> float:
        return float(np.min(np.linalg.eigvalsh(self.matrices)))


def stokes_apply(u: SpectralVelocity, mu: float) -> SpectralVelocity:
    """mu A u with A = -Laplacian, i.e. multiplication by mu |kappa|^2."""
    if mu < 0:
        raise ValueError(f"Invalid viscosity mu={mu}")
    return SpectralVelocity(mu * u.grid.kappa_sq * u.coefficients, u.grid)


def _advection_array(u: SpectralVelocity, v: SpectralVelocity) -> np.ndarray:
    """Spectral coefficients of (u . grad) v before projection."""
    u_phys = inverse_transform(u).samples
    grad_v = gradient_tensor(v)
    product = np.einsum("jxyz,ijxyz->ixyz", u_phys, grad_v)
    return to_spectral_array(product, u.grid.n_per_axis)


def convective_term(u: SpectralVelocity) -> SpectralVelocity:
    """B(u) = P[(u . grad) u], computed pseudo-spectrally and dealiased by
    truncation to the retained modes."""
    return SpectralVelocity(
        project_array(_advection_array(u, u), u.grid), u.grid
    )


def trilinear_form(
    u: SpectralVelocity, v: SpectralVelocity, w: SpectralVelocity
) -> float:
    """b(u, v, w) = integral of ((u . grad) v) . w.

    The product is truncated to the retained modes before pairing with w,
    which makes b(u, v, v) = 0 hold to rounding for divergence-free u.
    """
    grid = u.grid
    advected = np.where(grid.retained, _advection_array(u, v), 0.0)
    return grid.volume * float(
        np.sum(np.real(np.conj(w.coefficients) * advected))
    )


def damping_vectors(
    u: np.ndarray, d: DampingParams
) -> np.ndarray:
    """g applied to an array of 3-vectors, last axis of length 3."""
    magnitude = np.linalg.norm(u, axis=-1, keepdims=True)
    factor = np.zeros_like(magnitude)
    np.power(magnitude, d.beta - 1.0, out=factor, where=magnitude > 0)
    return d.alpha * factor * u


def damping_jacobian_vectors(
    u: np.ndarray, d: DampingParams
) -> np.ndarray:
    """g'(u) = alpha |u|^(beta-1) I + alpha (beta-1) |u|^(beta-3) u u^T for
    an array of 3-vectors; defined as 0 where u = 0."""
    magnitude = np.linalg.norm(u, axis=-1)
    nonzero = magnitude > 0
    iso = np.zeros_like(magnitude)
    aniso = np.zeros_like(magnitude)
    np.power(magnitude, d.beta - 1.0, out=iso, where=nonzero)
    np.power(magnitude, d.beta - 3.0, out=aniso, where=nonzero)
    outer = u[..., :, np.newaxis] * u[..., np.newaxis, :]
    identity = np.broadcast_to(np.eye(3), outer.shape)
    return d.alpha * (
        iso[..., np.newaxis, np.newaxis] * identity
        + (d.beta - 1.0) * aniso[..., np.newaxis, np.newaxis] * outer
    )


def damping_apply(p: PhysicalVelocity, d: DampingParams) -> PhysicalVelocity:
    """Pointwise g(u(x))."""
    values = damping_vectors(np.moveaxis(p.samples, 0, -1), d)
    return PhysicalVelocity(np.moveaxis(values, -1, 0), p.grid)


def damping_jacobian(p: PhysicalVelocity, d: DampingParams) -> JacobianField:
    return JacobianField(
        damping_jacobian_vectors(np.moveaxis(p.samples, 0, -1), d)
    )


def damping_projected(
    u: SpectralVelocity,
    d: DampingParams,
    taming_dt: Optional[float] = None,
) -> SpectralVelocity:
    """P g(u). With ``taming_dt`` the pointwise value is divided by
    1 + dt alpha |u|^(beta-1) before projection."""
    samples = np.moveaxis(inverse_transform(u).samples, 0, -1)
    values = damping_vectors(samples, d)
    if taming_dt is not None:
        magnitude = np.linalg.norm(samples, axis=-1, keepdims=True)
        values = values / (
            1.0 + taming_dt * d.alpha * magnitude ** (d.beta - 1.0)
        )
    spectral = to_spectral_array(np.moveaxis(values, -1, 0), u.grid.n_per_axis)
    return SpectralVelocity(project_array(spectral, u.grid), u.grid)


def damping_monotonicity_check(
    u: np.ndarray, v: np.ndarray, d: DampingParams
) -> np.ndarray:
    """(g(u) - g(v)) . (u - v); nonnegative by monotonicity of g.

    Accepts single 3-vectors or stacks of them.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    difference = damping_vectors(u, d) - damping_vectors(v, d)
    return np.sum(difference * (u - v), axis=-1)


def damping_local_lipschitz_check(
    u: np.ndarray,
    v: np.ndarray,
    d: DampingParams,
    constant: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Local Lipschitz bound of g:

    |g(u) - g(v)| <= alpha |u|^(beta-1) |u-v|
                     + C alpha |v| (|u|^(beta-2) + |v|^(beta-2)) |u-v|

    Returns (lhs, rhs). C defaults to beta; beta - 1 already suffices.
    """
    if d.beta < 2:
        raise ValueError(
            f"Unsupported exponent beta={d.beta} for the local Lipschitz "
            "check, need beta >= 2"
        )
    c = d.beta if constant is None else constant
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    gap = np.linalg.norm(u - v, axis=-1)
    lhs = np.linalg.norm(
        damping_vectors(u, d) - damping_vectors(v, d), axis=-1
    )
    rhs = d.alpha * nu ** (d.beta - 1.0) * gap + c * d.alpha * nv * (
        nu ** (d.beta - 2.0) + nv ** (d.beta - 2.0)
    ) * gap
    return lhs, rhs
