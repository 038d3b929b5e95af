import logging
import math
from typing import List, Optional

from damped_sns.noise import (
    MOMENT_ORDER_CONDITION,
    UNIQUENESS_CONDITION,
    admissible_p_range,
)
from damped_sns.operators import STRONG_MODE_CONDITION, DampingParams

STRONG_MODE = "strong_mode"
MOMENT_ORDER = "moment_order"
UNIQUENESS = "uniqueness"


class ConfigError(ValueError):
    """A configuration that cannot be run."""

    def __init__(self, problems: List[str]) -> None:
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class GateViolation(ConfigError):
    """An admissibility inequality does not hold for the requested run."""


def strong_mode_message(damping: DampingParams) -> str:
    return (
        f"strong-solution gate violated, requires {STRONG_MODE_CONDITION} "
        f"(got β={damping.beta:g}, α={damping.alpha:g})"
    )


def check_strong_mode(damping: DampingParams) -> None:
    if not damping.strong_mode_ok():
        raise GateViolation([strong_mode_message(damping)])


def check_moment_order(p: float, eta: float) -> None:
    low, high = admissible_p_range(eta)
    if not low <= p < high:
        upper = "∞" if math.isinf(high) else f"{high:g}"
        raise GateViolation(
            [
                "moment-order gate violated, requires "
                f"{MOMENT_ORDER_CONDITION} (η={eta:g} admits "
                f"p ∈ [{low:g}, {upper}), got p={p:g})"
            ]
        )


def check_uniqueness(lipschitz_constant: float) -> None:
    if not lipschitz_constant < 2:
        raise GateViolation(
            [
                f"uniqueness gate violated, requires {UNIQUENESS_CONDITION} "
                f"(measured L={lipschitz_constant:g})"
            ]
        )


def record_gate(
    handle: dict,
    gate: str,
    condition: str,
    passed: bool,
    detail: Optional[str] = None,
) -> None:
    """
    Records the outcome of an admissibility gate in the handle

    Args:
        |   handle: run handle created by initialise
        |   gate: gate name, one of 'strong_mode', 'moment_order', 'uniqueness'
        |   condition: the inequality checked, verbatim
        |   passed: whether it holds
        |   detail: values the inequality was evaluated at
    """
    if gate not in {STRONG_MODE, MOMENT_ORDER, UNIQUENESS}:
        raise ValueError(f"Error: unknown gate {gate}")

    gate_dict = {
        "gate": gate,
        "condition": condition,
        "passed": bool(passed),
        "detail": detail,
    }

    if passed:
        logging.info("Gate {} passed: {}".format(gate, condition))
    else:
        logging.warning(
            "Gate {} failed: {} ({})".format(gate, condition, detail)
        )

    if "gates" in handle:
        this_gate = "gate_" + str(len(handle["gates"]))
        handle["gates"][this_gate] = gate_dict
    else:
        handle["gates"] = {}
        handle["gates"]["gate_0"] = gate_dict
