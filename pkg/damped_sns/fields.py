"""Velocity fields on the periodic 3-torus.

A field is stored spectrally as the full ``(3, n, n, n)`` array of Fourier
coefficients ``c_m`` normalised so that ``u(x) = sum_m c_m exp(i kappa_m . x)``
with ``kappa_m = 2 pi m / box_length``. The Galerkin space is the set of
nonzero wavevectors inside the dealiasing sphere; ``leray_project`` is the
orthogonal projection onto its divergence-free part.
"""

import logging
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

STRUCTURAL_TOL = 1e-12
NUMERICAL_TOL = 1e-10

SNAPSHOT_MAGIC = b"SNSD"
SNAPSHOT_VERSION = 1
SNAPSHOT_HEADER = struct.Struct("<4sIIdQ")
SNAPSHOT_RECORD = np.dtype([("k", "<i4", (3,)), ("c", "<f8", (6,))])

_FFT_AXES = (-3, -2, -1)


@dataclass(frozen=True)
class GridSpec:
    """Periodic cubic grid and its retained (Galerkin) wavevector set.

    Args:
        |   n_per_axis: grid points per axis, even and at least 4
        |   box_length: side of the periodic box
        |   dealias_fraction: radius of the retained sphere as a fraction of
        |       the Nyquist index n/2
    """

    n_per_axis: int
    box_length: float = 2.0 * math.pi
    dealias_fraction: float = 2.0 / 3.0

    def __post_init__(self) -> None:
        if int(self.n_per_axis) != self.n_per_axis:
            raise ValueError("n_per_axis must be an integer")
        if self.n_per_axis < 4 or self.n_per_axis % 2:
            raise ValueError(
                f"n_per_axis must be even and >= 4, got {self.n_per_axis}"
            )
        if not self.box_length > 0:
            raise ValueError(f"box_length must be > 0, got {self.box_length}")
        if not 0 < self.dealias_fraction <= 1:
            raise ValueError(
                "dealias_fraction must lie in (0, 1], got "
                f"{self.dealias_fraction}"
            )
        if not np.any(self.retained):
            raise ValueError("No wavevector survives the dealiasing cut")

    @property
    def shape(self) -> tuple:
        n = self.n_per_axis
        return (n, n, n)

    @property
    def volume(self) -> float:
        return self.box_length**3

    @property
    def cell_volume(self) -> float:
        return (self.box_length / self.n_per_axis) ** 3

    @property
    def poincare_constant(self) -> float:
        """c in |u|_H^2 <= c ||u||^2 for zero-mean fields."""
        return (self.box_length / (2.0 * math.pi)) ** 2

    @cached_property
    def wavevector_indices(self) -> np.ndarray:
        """Integer wavevectors m, shape (3, n, n, n), in FFT order."""
        n = self.n_per_axis
        m = np.rint(np.fft.fftfreq(n, d=1.0 / n)).astype(np.int64)
        return np.array(np.meshgrid(m, m, m, indexing="ij"))

    @cached_property
    def kappa(self) -> np.ndarray:
        return (2.0 * math.pi / self.box_length) * self.wavevector_indices

    @cached_property
    def kappa_sq(self) -> np.ndarray:
        return np.sum(self.kappa**2, axis=0)

    @cached_property
    def kappa_sq_safe(self) -> np.ndarray:
        safe = self.kappa_sq.copy()
        safe[0, 0, 0] = 1.0
        return safe

    @cached_property
    def kappa_derivative(self) -> np.ndarray:
        """kappa with the unpaired Nyquist plane zeroed per component, so
        spectral derivatives of real fields stay real."""
        nyquist = np.abs(self.wavevector_indices) == self.n_per_axis // 2
        return np.where(nyquist, 0.0, self.kappa)

    @cached_property
    def retained(self) -> np.ndarray:
        m = self.wavevector_indices
        radius = self.dealias_fraction * self.n_per_axis / 2.0
        inside = np.sum(m**2, axis=0) <= radius**2 + 1e-9
        below_nyquist = np.all(np.abs(m) < self.n_per_axis // 2, axis=0)
        nonzero = np.any(m != 0, axis=0)
        return inside & below_nyquist & nonzero

    @property
    def n_modes(self) -> int:
        return int(np.count_nonzero(self.retained))

    @cached_property
    def galerkin_modes(self) -> np.ndarray:
        """Retained wavevectors ordered by |m|^2, ties lexicographic."""
        m = self.wavevector_indices[:, self.retained].T
        order = np.lexsort((m[:, 2], m[:, 1], m[:, 0], np.sum(m**2, axis=1)))
        return m[order]

    def index_of(self, modes: np.ndarray) -> tuple:
        """Array indices of integer wavevectors, shape (..., 3)."""
        wrapped = np.mod(np.asarray(modes), self.n_per_axis)
        return (wrapped[..., 0], wrapped[..., 1], wrapped[..., 2])


@dataclass(frozen=True, eq=False)
class SpectralVelocity:
    """Fourier coefficients of a real velocity field, shape (3, n, n, n).

    The array is frozen on construction. A field produced by
    ``leray_project`` is Hermitian, divergence-free, zero-mean and supported
    on the retained modes; ``forward_transform`` output is a raw field that
    need not be.
    """

    coefficients: np.ndarray
    grid: GridSpec

    def __post_init__(self) -> None:
        coefficients = np.asarray(self.coefficients, dtype=np.complex128)
        if coefficients.shape != (3,) + self.grid.shape:
            raise ValueError(
                f"Expected coefficient shape {(3,) + self.grid.shape}, "
                f"got {coefficients.shape}"
            )
        coefficients.setflags(write=False)
        object.__setattr__(self, "coefficients", coefficients)

    @classmethod
    def zeros(cls, grid: GridSpec) -> "SpectralVelocity":
        return cls(np.zeros((3,) + grid.shape, dtype=np.complex128), grid)

    def __add__(self, other: "SpectralVelocity") -> "SpectralVelocity":
        _same_grid(self, other)
        coefficients = self.coefficients + other.coefficients
        return SpectralVelocity(coefficients, self.grid)

    def __sub__(self, other: "SpectralVelocity") -> "SpectralVelocity":
        _same_grid(self, other)
        coefficients = self.coefficients - other.coefficients
        return SpectralVelocity(coefficients, self.grid)

    def scaled(self, factor: float) -> "SpectralVelocity":
        return SpectralVelocity(factor * self.coefficients, self.grid)

    def inner(self, other: "SpectralVelocity") -> float:
        """H inner product (u, v) = integral of u . v over the box."""
        _same_grid(self, other)
        return self.grid.volume * float(
            np.sum(np.real(np.conj(self.coefficients) * other.coefficients))
        )

    def h_norm_sq(self) -> float:
        return self.grid.volume * float(np.sum(np.abs(self.coefficients) ** 2))

    def v_norm_sq(self) -> float:
        return self.grid.volume * float(
            np.sum(self.grid.kappa_sq * np.abs(self.coefficients) ** 2)
        )

    def magnitude(self) -> float:
        return float(np.max(np.abs(self.coefficients)))

    def divergence_defect(self) -> float:
        """max_k |kappa . c(k)| relative to the field magnitude."""
        div = np.abs(np.sum(self.grid.kappa * self.coefficients, axis=0))
        scale = self.magnitude() * math.sqrt(float(np.max(self.grid.kappa_sq)))
        return float(np.max(div)) / scale if scale > 0 else 0.0

    def hermitian_defect(self) -> float:
        """max |c(-k) - conj(c(k))| relative to the field magnitude."""
        n = self.grid.n_per_axis
        m = self.grid.wavevector_indices
        mirror = self.coefficients[:, (-m[0]) % n, (-m[1]) % n, (-m[2]) % n]
        paired = np.all(np.abs(m) < n // 2, axis=0)
        defect = np.abs(mirror - np.conj(self.coefficients))[:, paired]
        scale = self.magnitude()
        return float(np.max(defect)) / scale if scale > 0 else 0.0

    def is_velocity(self, tol: float = STRUCTURAL_TOL) -> bool:
        """True when the field lies in the divergence-free Galerkin space."""
        outside = np.abs(self.coefficients[:, ~self.grid.retained])
        scale = max(self.magnitude(), 1e-300)
        return (
            self.divergence_defect() <= tol
            and self.hermitian_defect() <= tol
            and float(np.max(outside, initial=0.0)) <= tol * scale
        )


@dataclass(frozen=True, eq=False)
class PhysicalVelocity:
    """Real grid samples of a velocity field, shape (3, n, n, n)."""

    samples: np.ndarray
    grid: GridSpec

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.shape != (3,) + self.grid.shape:
            raise ValueError(
                f"Expected sample shape {(3,) + self.grid.shape}, "
                f"got {samples.shape}"
            )
        if not np.all(np.isfinite(samples)):
            raise ValueError("Physical velocity contains non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def magnitude(self) -> np.ndarray:
        """|u(x)| at every grid point."""
        return np.sqrt(np.sum(self.samples**2, axis=0))

    def integrate(self, density: np.ndarray) -> float:
        """Rectangle-rule quadrature, exact for resolved trigonometric
        polynomials on the periodic grid."""
        return self.grid.cell_volume * float(np.sum(density))


@dataclass(frozen=True)
class NormReport:
    h_norm_sq: float
    v_norm_sq: float
    lp_norm: float
    grad_h_norm_sq: float
    grad_v_norm_sq: float
    beta: float

    def poincare_holds(self, grid: GridSpec) -> bool:
        bound = grid.poincare_constant * self.v_norm_sq
        return self.h_norm_sq <= bound * (1 + NUMERICAL_TOL) + 1e-300


def _same_grid(a: SpectralVelocity, b: SpectralVelocity) -> None:
    if a.grid != b.grid:
        raise ValueError("Fields live on different grids")


def to_physical_array(coefficients: np.ndarray, n: int) -> np.ndarray:
    """Inverse FFT over the last three axes, real part."""
    values = np.fft.ifftn(coefficients, axes=_FFT_AXES) * n**3
    return np.ascontiguousarray(values.real)


def to_spectral_array(samples: np.ndarray, n: int) -> np.ndarray:
    """Forward FFT over the last three axes, normalised coefficients."""
    return np.fft.fftn(samples, axes=_FFT_AXES) / n**3


def forward_transform(p: PhysicalVelocity) -> SpectralVelocity:
    """Discrete Fourier analysis of a physical field. No truncation is
    applied, so ``inverse_transform`` recovers the samples exactly."""
    if not np.all(np.isfinite(p.samples)):
        raise ValueError("Cannot transform non-finite samples")
    return SpectralVelocity(
        to_spectral_array(p.samples, p.grid.n_per_axis), p.grid
    )


def inverse_transform(s: SpectralVelocity) -> PhysicalVelocity:
    return PhysicalVelocity(
        to_physical_array(s.coefficients, s.grid.n_per_axis), s.grid
    )


def project_array(coefficients: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Leray projection followed by truncation to the retained modes."""
    kappa = grid.kappa
    k_dot_c = np.sum(kappa * coefficients, axis=0)
    projected = coefficients - kappa * (k_dot_c / grid.kappa_sq_safe)
    return np.where(grid.retained, projected, 0.0)


def leray_project(s: SpectralVelocity) -> SpectralVelocity:
    """Orthogonal projection onto divergence-free, zero-mean fields spanned
    by the retained modes. Idempotent and self-adjoint in H."""
    return SpectralVelocity(project_array(s.coefficients, s.grid), s.grid)


def gradient_tensor(s: SpectralVelocity) -> np.ndarray:
    """du_i/dx_j in physical space, shape (3, 3, n, n, n)."""
    grid = s.grid
    derivative = grid.kappa_derivative[np.newaxis, :]
    spectral = 1j * derivative * s.coefficients[:, np.newaxis]
    return to_physical_array(spectral, grid.n_per_axis)


def compute_norms(s: SpectralVelocity, beta: float) -> NormReport:
    """All norms entering the a priori estimates.

    |u|_H^2 and ||u||^2 come from Parseval, |u|_{beta+1}^{beta+1} and
    |grad u|_2^2 from physical-space quadrature, ||grad u||^2 is the H^2
    seminorm sum |kappa|^4 |c|^2.
    """
    physical = inverse_transform(s)
    return norms_with_fields(s, physical, gradient_tensor(s), beta)


def norms_with_fields(
    s: SpectralVelocity,
    physical: PhysicalVelocity,
    grad: np.ndarray,
    beta: float,
) -> NormReport:
    """compute_norms reusing an existing physical field and gradient."""
    if beta < 1:
        raise ValueError(f"Invalid exponent beta={beta}, need beta >= 1")
    grid = s.grid
    energy = np.abs(s.coefficients) ** 2
    return NormReport(
        h_norm_sq=grid.volume * float(np.sum(energy)),
        v_norm_sq=grid.volume * float(np.sum(grid.kappa_sq * energy)),
        lp_norm=physical.integrate(physical.magnitude() ** (beta + 1)),
        grad_h_norm_sq=physical.integrate(np.sum(grad**2, axis=(0, 1))),
        grad_v_norm_sq=grid.volume
        * float(np.sum(grid.kappa_sq**2 * energy)),
        beta=beta,
    )


def grad_magnitude_power_field(p: PhysicalVelocity, beta: float) -> float:
    """|grad |u|^((beta+1)/2)|_2^2 at one instant."""
    if beta < 1:
        raise ValueError(f"Invalid exponent beta={beta}, need beta >= 1")
    grid = p.grid
    w = p.magnitude() ** ((beta + 1.0) / 2.0)
    w_hat = to_spectral_array(w, grid.n_per_axis)
    return grid.volume * float(np.sum(grid.kappa_sq * np.abs(w_hat) ** 2))


def random_solenoidal(
    grid: GridSpec,
    rng: np.random.Generator,
    decay: float = 2.0,
    v_norm_sq: Optional[float] = None,
) -> SpectralVelocity:
    """Random smooth velocity: white noise coloured by |kappa|^-decay, then
    projected. With ``v_norm_sq`` the field is rescaled to that H^1
    seminorm."""
    white = rng.standard_normal((3,) + grid.shape)
    coefficients = to_spectral_array(white, grid.n_per_axis)
    coefficients = coefficients * grid.kappa_sq_safe ** (-decay / 2.0)
    field = SpectralVelocity(project_array(coefficients, grid), grid)
    if v_norm_sq is not None:
        current = field.v_norm_sq()
        if current == 0:
            raise ValueError("Random field vanished after projection")
        field = field.scaled(math.sqrt(v_norm_sq / current))
    return field


def regrid(s: SpectralVelocity, grid: GridSpec) -> SpectralVelocity:
    """Move a field to another resolution by zero padding or truncation.

    Restriction to a coarser grid is the Galerkin projection onto that
    grid's retained modes.
    """
    if not math.isclose(s.grid.box_length, grid.box_length):
        raise ValueError("Cannot regrid between boxes of different size")
    modes = grid.galerkin_modes
    representable = np.all(np.abs(modes) < s.grid.n_per_axis // 2, axis=1)
    modes = modes[representable]
    out = np.zeros((3,) + grid.shape, dtype=np.complex128)
    out[(slice(None),) + grid.index_of(modes)] = s.coefficients[
        (slice(None),) + s.grid.index_of(modes)
    ]
    return SpectralVelocity(out, grid)


def write_snapshot(s: SpectralVelocity, path: str) -> str:
    """Write the retained modes of a field in the binary snapshot layout
    (see docs/formats.rst)."""
    grid = s.grid
    modes = grid.galerkin_modes
    values = s.coefficients[(slice(None),) + grid.index_of(modes)].T
    records = np.zeros(len(modes), dtype=SNAPSHOT_RECORD)
    records["k"] = modes
    records["c"][:, 0::2] = values.real
    records["c"][:, 1::2] = values.imag
    header = SNAPSHOT_HEADER.pack(
        SNAPSHOT_MAGIC,
        SNAPSHOT_VERSION,
        grid.n_per_axis,
        grid.box_length,
        len(modes),
    )
    with open(path, "wb") as snapshot:
        snapshot.write(header)
        snapshot.write(records.tobytes())
    logging.info("Writing snapshot of {} modes to {}".format(len(modes), path))
    return path


def read_snapshot(
    path: str, dealias_fraction: float = 2.0 / 3.0
) -> SpectralVelocity:
    with open(path, "rb") as snapshot:
        raw = snapshot.read()
    if len(raw) < SNAPSHOT_HEADER.size:
        raise ValueError(f"Snapshot {path} is truncated")
    magic, version, n, box_length, count = SNAPSHOT_HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path} is not a velocity snapshot")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"Unsupported snapshot version {version}")
    expected = SNAPSHOT_HEADER.size + count * SNAPSHOT_RECORD.itemsize
    if len(raw) != expected:
        raise ValueError(
            f"Snapshot {path} has {len(raw)} bytes, expected {expected}"
        )
    records = np.frombuffer(
        raw, dtype=SNAPSHOT_RECORD, count=count, offset=SNAPSHOT_HEADER.size
    )
    grid = GridSpec(int(n), float(box_length), dealias_fraction)
    modes = records["k"].astype(np.int64)
    if not np.all(grid.retained[grid.index_of(modes)]) or np.any(
        np.abs(modes) >= n // 2
    ):
        raise ValueError("Snapshot holds modes outside the retained set")
    values = records["c"][:, 0::2] + 1j * records["c"][:, 1::2]
    out = np.zeros((3,) + grid.shape, dtype=np.complex128)
    out[(slice(None),) + grid.index_of(modes)] = values.T
    logging.info("Reading snapshot of {} modes from {}".format(count, path))
    return SpectralVelocity(out, grid)
