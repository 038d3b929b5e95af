__version__ = "0.1.0"

__all__ = [
    "initialise",
    "link_read",
    "link_write",
    "finalise",
    "parse_config",
    "record_gate",
    "ConfigError",
    "GateViolation",
    "GridSpec",
    "SpectralVelocity",
    "DampingParams",
    "NoiseModel",
    "RandomStream",
    "SimConfig",
    "integrate",
    "record_trajectory",
    "twin_integrate",
    "rate_function_eval",
    "run_suite",
]

from .config import parse_config
from .fields import GridSpec, SpectralVelocity
from .gates import ConfigError, GateViolation, record_gate
from .integrator import (
    SimConfig,
    integrate,
    record_trajectory,
    twin_integrate,
)
from .ldp import rate_function_eval
from .link import link_read, link_write
from .noise import NoiseModel, RandomStream
from .operators import DampingParams
from .pipeline import finalise, initialise
from .properties import run_suite
