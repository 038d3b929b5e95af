"""Run configuration files.

A configuration is a YAML document with one level of sections, each a flat
map of keys to scalars or lists::

    run_metadata:   description, seed, workers, output_dir
    grid:           n_per_axis, box_length, dealias_fraction
    physics:        mu, alpha, beta, forcing_amplitude
    noise:          kind, sigma, gamma, n_pairs, gain_scale
    integrator:     dt, t_end, scheme, epsilon, strong_mode
    initial:        preset, amplitude, v_norm_sq, decay, seed, path
    experiment:     see ``ExperimentSpec``
    read:           list of {data_product, path}
    write:          list of {data_product, file_type, description}

A run manifest written by ``pipeline.finalise`` holds the configuration it
ran under in its ``config`` section and is accepted in place of a
configuration.
"""

import copy
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from damped_sns.fields import GridSpec
from damped_sns.gates import (
    ConfigError,
    GateViolation,
    check_moment_order,
    check_uniqueness,
    strong_mode_message,
)
from damped_sns.integrator import (
    SEMI_IMPLICIT,
    ConstantForcing,
    InitialData,
    SimConfig,
    shear_field,
)
from damped_sns.noise import ADDITIVE, NoiseModel
from damped_sns.operators import DampingParams

OUTPUT_DIR_ENV = "DAMPED_SNS_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "out"
INITIAL_CONDITION = "initial_condition"
DEFAULT_LADDER = (4, 8, 16)

_INT = "integer"
_FLOAT = "number"
_STR = "string"
_BOOL = "boolean"
_FLOATS = "list of numbers"
_INTS = "list of integers"

SCHEMA: Dict[str, Dict[str, str]] = {
    "run_metadata": {
        "description": _STR,
        "seed": _INT,
        "workers": _INT,
        "output_dir": _STR,
    },
    "grid": {
        "n_per_axis": _INT,
        "box_length": _FLOAT,
        "dealias_fraction": _FLOAT,
    },
    "physics": {
        "mu": _FLOAT,
        "alpha": _FLOAT,
        "beta": _FLOAT,
        "forcing_amplitude": _FLOAT,
    },
    "noise": {
        "kind": _STR,
        "sigma": _FLOAT,
        "gamma": _FLOAT,
        "n_pairs": _INT,
        "gain_scale": _FLOAT,
    },
    "integrator": {
        "dt": _FLOAT,
        "t_end": _FLOAT,
        "scheme": _STR,
        "epsilon": _FLOAT,
        "strong_mode": _BOOL,
    },
    "initial": {
        "preset": _STR,
        "amplitude": _FLOAT,
        "v_norm_sq": _FLOAT,
        "decay": _FLOAT,
        "seed": _INT,
        "path": _STR,
    },
    "experiment": {
        "n_samples": _INT,
        "p": _FLOAT,
        "eta": _FLOAT,
        "lipschitz_L": _FLOAT,
        "resolutions": _INTS,
        "epsilons": _FLOATS,
        "delta": _FLOAT,
        "thresholds": _FLOATS,
        "criteria": _STR,
        "a_coeff": _FLOAT,
        "perturbation": _FLOAT,
        "n_boot": _INT,
        "path_coordinates": _FLOATS,
        "unforced_mode": _INTS,
        "unforced_amplitude": _FLOAT,
        "path_points": _INT,
        "tube_radius": _FLOAT,
    },
}
LIST_SECTIONS = ("read", "write")
REQUIRED = {
    "grid": ("n_per_axis",),
    "physics": ("mu", "alpha", "beta"),
    "integrator": ("dt", "t_end"),
}


@dataclass(frozen=True)
class ExperimentSpec:
    """Parameters of the ensemble experiments.

    Args:
        |   n_samples: trajectories, pairs or Monte Carlo samples per estimate
        |   p: moment order of the moment ladder
        |   eta: coercivity constant the moment order is checked against
        |   lipschitz_L: declared Lipschitz constant of G, checked against L<2
        |   resolutions: grid sizes of the resolution ladder, 4, 8, 16 for
        |       the moment ladder when empty
        |   epsilons: small-time parameters of the tail experiments
        |   delta: tail threshold of the difference experiments
        |   thresholds: increasing thresholds M of the energy tails
        |   criteria: exit criteria, 'rescaled' or 'diffusion'
        |   a_coeff: coefficient of the twin weight r(t) = a int ||u2||^4
        |   perturbation: |U(0)|_H^2 of the twin runs
        |   n_boot: bootstrap resamples
        |   path_coordinates: noise coordinates of the straight path velocity
        |   unforced_mode: wavevector of an extra unforced path component
        |   unforced_amplitude: amplitude of that component
        |   path_points: time grid points of the rate function evaluation
        |   tube_radius: radius of the tube event of the consistency report
    """

    n_samples: int = 100
    p: Optional[float] = None
    eta: float = 2.0
    lipschitz_L: Optional[float] = None
    resolutions: Sequence[int] = ()
    epsilons: Sequence[float] = (0.2, 0.1, 0.05)
    delta: Optional[float] = None
    thresholds: Sequence[float] = ()
    criteria: str = "rescaled"
    a_coeff: float = 1.0
    perturbation: float = 0.0
    n_boot: int = 1000
    path_coordinates: Sequence[float] = ()
    unforced_mode: Optional[Sequence[int]] = None
    unforced_amplitude: float = 1.0
    path_points: int = 11
    tube_radius: Optional[float] = None


@dataclass
class RunConfig:
    sim: SimConfig
    experiment: ExperimentSpec
    metadata: Dict[str, Any]
    document: Dict[str, Any]
    source: str
    read: List[dict] = field(default_factory=list)
    write: List[dict] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.sim.seed

    @property
    def workers(self) -> int:
        return int(self.metadata.get("workers", 1))


def _position(err: yaml.YAMLError) -> str:
    mark = getattr(err, "problem_mark", None) or getattr(
        err, "context_mark", None
    )
    if mark is None:
        return ""
    return f" at line {mark.line + 1}, column {mark.column + 1}"


def load_document(path: str) -> Dict[str, Any]:
    """Read a configuration or manifest, returning the configuration part."""
    if not os.path.isfile(path):
        raise ConfigError([f"Config file {path} does not exist"])
    with open(path, "r") as data:
        try:
            document = yaml.safe_load(data)
        except yaml.YAMLError as err:
            problem = getattr(err, "problem", None) or str(err)
            raise ConfigError(
                [f"{path}: malformed YAML{_position(err)}: {problem}"]
            ) from err
    if not isinstance(document, dict):
        raise ConfigError([f"{path}: expected a mapping of sections"])
    if "config" in document and "run_id" in document:
        logging.info("Replaying manifest of run {}".format(document["run_id"]))
        document = document["config"]
        if not isinstance(document, dict):
            raise ConfigError([f"{path}: manifest config is not a mapping"])
    return document


def _check_type(value: Any, kind: str) -> bool:
    if kind == _INT:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == _FLOAT:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == _STR:
        return isinstance(value, str)
    if kind == _BOOL:
        return isinstance(value, bool)
    if kind in (_FLOATS, _INTS):
        item = _FLOAT if kind == _FLOATS else _INT
        return isinstance(value, list) and all(
            _check_type(v, item) for v in value
        )
    return False


def _coerce(value: Any, kind: str) -> Any:
    """YAML 1.1 reads exponent floats without a dot, such as 1e-3, as
    strings."""
    if kind == _FLOAT and isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    if kind == _FLOATS and isinstance(value, list):
        return [_coerce(v, _FLOAT) for v in value]
    return value


def validate_document(document: Dict[str, Any]) -> List[str]:
    """Unknown sections and keys, missing required keys and type errors."""
    problems = []
    for section, values in document.items():
        if section in LIST_SECTIONS:
            if not isinstance(values, list) or not all(
                isinstance(v, dict) and "data_product" in v for v in values
            ):
                problems.append(
                    f"{section}: expected a list of entries with a "
                    "data_product"
                )
            continue
        if section not in SCHEMA:
            problems.append(f"unknown section {section!r}")
            continue
        if values is None:
            continue
        if not isinstance(values, dict):
            problems.append(f"{section}: expected a mapping")
            continue
        for key, value in list(values.items()):
            if key in SCHEMA[section]:
                value = values[key] = _coerce(value, SCHEMA[section][key])
            if key not in SCHEMA[section]:
                problems.append(f"{section}.{key}: unknown key")
            elif value is not None and not _check_type(
                value, SCHEMA[section][key]
            ):
                problems.append(
                    f"{section}.{key}: expected {SCHEMA[section][key]}, "
                    f"got {value!r}"
                )
    for section, keys in REQUIRED.items():
        present = document.get(section) or {}
        for key in keys:
            if not isinstance(present, dict) or present.get(key) is None:
                problems.append(f"{section}.{key}: required key missing")
    return problems


def _section(document: Dict[str, Any], name: str) -> Dict[str, Any]:
    values = document.get(name) or {}
    return {k: v for k, v in values.items() if v is not None}


def _initial(document: Dict[str, Any], config_dir: str) -> InitialData:
    values = _section(document, "initial")
    if values.get("preset") == "snapshot" and "path" not in values:
        for entry in document.get("read", []):
            if entry["data_product"] == INITIAL_CONDITION and "path" in entry:
                values["path"] = entry["path"]
    if "path" in values and not os.path.isabs(values["path"]):
        values["path"] = os.path.join(config_dir, values["path"])
    if "path" in values:
        if document.get("initial") is None:
            document["initial"] = {}
        document["initial"]["path"] = values["path"]
    return InitialData(**values)


def _experiment(document: Dict[str, Any]) -> ExperimentSpec:
    values = _section(document, "experiment")
    for key in ("resolutions", "epsilons", "thresholds", "path_coordinates"):
        if key in values:
            values[key] = tuple(values[key])
    return ExperimentSpec(**values)


def gate_problems(
    damping: DampingParams, strong_mode: bool, experiment: ExperimentSpec
) -> List[str]:
    """Every violated admissibility inequality of a configuration."""
    problems = []
    if strong_mode and not damping.strong_mode_ok():
        problems.append(strong_mode_message(damping))
    if experiment.p is not None:
        try:
            check_moment_order(experiment.p, experiment.eta)
        except (GateViolation, ValueError) as err:
            problems.append(str(err))
    if experiment.lipschitz_L is not None:
        try:
            check_uniqueness(experiment.lipschitz_L)
        except GateViolation as err:
            problems.append(str(err))
    return problems


def ladder_rungs(experiment: ExperimentSpec) -> Tuple[int, ...]:
    """Grid sizes of the resolution ladder the experiment will run."""
    if experiment.resolutions:
        return tuple(experiment.resolutions)
    if experiment.p is not None:
        return DEFAULT_LADDER
    return ()


def rung_problems(
    noise: NoiseModel, experiment: ExperimentSpec
) -> List[str]:
    """Ladder rungs that cannot carry the forced pairs of ``noise``."""
    problems = []
    grid = noise.grid
    for n in ladder_rungs(experiment):
        try:
            rung = GridSpec(n, grid.box_length, grid.dealias_fraction)
            noise.on_grid(rung)
        except ValueError as err:
            problems.append(f"experiment.resolutions rung {n}: {err}")
    return problems


def parse_config(
    path: str, overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """
    Reads and fully validates a configuration (or manifest)

    Args:
        |   path: path to the YAML file
        |   overrides: run_metadata values taking precedence over the file,
        |       e.g. {'seed': 7, 'workers': 4}

    Returns:
        |   RunConfig: the simulation config and the experiment section

    Raises:
        |   ConfigError: malformed file, unknown or missing keys, bad values
        |   GateViolation: an admissibility inequality does not hold
    """
    document = copy.deepcopy(load_document(path))
    metadata = dict(document.get("run_metadata") or {})
    for key, value in (overrides or {}).items():
        if value is not None:
            metadata[key] = value
    document["run_metadata"] = metadata

    problems = validate_document(document)
    if problems:
        raise ConfigError([f"{path}: {problem}" for problem in problems])

    config_dir = os.path.dirname(os.path.abspath(path))
    try:
        grid = GridSpec(**_section(document, "grid"))
        physics = _section(document, "physics")
        damping = DampingParams(physics["alpha"], physics["beta"])
        integrator = _section(document, "integrator")
        experiment = _experiment(document)
        strong_mode = bool(integrator.get("strong_mode", False))

        gates = gate_problems(damping, strong_mode, experiment)
        if gates:
            for problem in gates:
                logging.warning(problem)
            raise GateViolation(gates)

        noise_values = _section(document, "noise")
        noise = NoiseModel(grid, **noise_values)
        forcing = None
        amplitude = physics.get("forcing_amplitude", 0.0)
        if amplitude:
            forcing = ConstantForcing(shear_field(grid, amplitude))
        sim = SimConfig(
            grid=grid,
            damping=damping,
            mu=physics["mu"],
            noise=noise,
            dt=integrator["dt"],
            t_end=integrator["t_end"],
            scheme=integrator.get("scheme", SEMI_IMPLICIT),
            epsilon=integrator.get("epsilon"),
            seed=int(metadata.get("seed", 0)),
            forcing=forcing,
            initial=_initial(document, config_dir),
            strong_mode=strong_mode,
        )
    except GateViolation:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError([f"{path}: {err}"]) from err

    rungs = rung_problems(noise, experiment)
    if rungs:
        raise ConfigError([f"{path}: {problem}" for problem in rungs])

    if int(metadata.get("workers", 1)) < 1:
        raise ConfigError([f"{path}: run_metadata.workers must be >= 1"])
    if noise.kind != ADDITIVE and noise.sigma == 0:
        logging.warning("Multiplicative noise with sigma = 0 has no effect")
    if sim.stability_ratio > 1e3:
        logging.warning(
            "dt mu max|kappa|^2 = {:.3g}; the explicit terms may be "
            "under-resolved".format(sim.stability_ratio)
        )
    logging.info("Reading configuration from {}".format(path))
    return RunConfig(
        sim=sim,
        experiment=experiment,
        metadata=metadata,
        document=document,
        source=path,
        read=list(document.get("read", [])),
        write=list(document.get("write", [])),
    )


def resolve_output_dir(
    out: Optional[str], metadata: Optional[Dict[str, Any]] = None
) -> str:
    """--out, else $DAMPED_SNS_OUTPUT_DIR, else run_metadata.output_dir,
    else ./out."""
    if out:
        return out
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return env
    if metadata and metadata.get("output_dir"):
        return str(metadata["output_dir"])
    return DEFAULT_OUTPUT_DIR
