import datetime
import logging
import os
from typing import Any, Dict, Optional

from damped_sns import sns_utils
from damped_sns.config import parse_config, resolve_output_dir
from damped_sns.gates import (
    MOMENT_ORDER,
    STRONG_MODE,
    UNIQUENESS,
    record_gate,
)
from damped_sns.noise import MOMENT_ORDER_CONDITION, UNIQUENESS_CONDITION
from damped_sns.operators import STRONG_MODE_CONDITION

WRITING_STR = "Writing {} to {}"
RUNS_FILE = "runs.txt"


def code_version() -> str:
    from damped_sns import __version__

    return __version__


def initialise(
    config: str,
    overrides: Optional[Dict[str, Any]] = None,
    out: Optional[str] = None,
) -> dict:
    """Reads in and validates the config file and opens a new run.

    Args:
        |   config: Path to config file, or to the manifest of an earlier run
        |   overrides: run_metadata values overriding the file (seed, workers)
        |   out: output directory taking precedence over the environment and
        |       the config

    Returns:
        |   dict: a dictionary containing the following keys:
        |       'yaml': effective configuration document,
        |       'config': parsed RunConfig,
        |       'config_path': config path,
        |       'config_hash': sha1 of the config file,
        |       'run_id': run identifier,
        |       'output_dir': output directory,
        |       'started': start timestamp,
        |       'gates': admissibility gates checked while parsing
    """

    # parse_config reports malformed YAML with its position
    run = parse_config(config, overrides)
    filename = os.path.basename(config)
    logging.info("Reading {} from local filestore".format(filename))

    output_dir = resolve_output_dir(out, run.metadata)
    if not os.path.exists(output_dir):
        os.makedirs(output_dir)

    handle = {
        "yaml": run.document,
        "config": run,
        "config_path": config,
        "config_dir": os.path.dirname(os.path.abspath(config)),
        "config_hash": sns_utils.get_file_hash(config),
        "run_id": sns_utils.generate_uuid(),
        "output_dir": output_dir,
        "started": str(datetime.datetime.now()),
    }

    # Gates enforced by parse_config held if we got here
    damping = run.sim.damping
    if run.sim.strong_mode:
        record_gate(
            handle,
            STRONG_MODE,
            STRONG_MODE_CONDITION,
            True,
            f"β={damping.beta:g}, α={damping.alpha:g}",
        )
    if run.experiment.p is not None:
        record_gate(
            handle,
            MOMENT_ORDER,
            MOMENT_ORDER_CONDITION,
            True,
            f"p={run.experiment.p:g}, η={run.experiment.eta:g}",
        )
    if run.experiment.lipschitz_L is not None:
        record_gate(
            handle,
            UNIQUENESS,
            UNIQUENESS_CONDITION,
            True,
            f"declared L={run.experiment.lipschitz_L:g}",
        )

    logging.info("Starting run {}".format(handle["run_id"]))
    return handle


def manifest(handle: dict) -> dict:
    """The run manifest recorded by finalise."""
    run = handle["config"]
    return sns_utils.plain(
        {
            "run_id": handle["run_id"],
            "description": run.metadata.get("description", ""),
            "seed": run.seed,
            "workers": run.workers,
            "code_version": code_version(),
            "started": handle["started"],
            "finished": handle.get("finished"),
            "config_path": handle["config_path"],
            "config_hash": handle["config_hash"],
            "inputs": list(handle.get("input", {}).values()),
            "outputs": list(handle.get("output", {}).values()),
            "gates": list(handle.get("gates", {}).values()),
            "config": handle["yaml"],
        }
    )


def finalise(handle: dict) -> str:
    """
    Checks and hashes every output, writes the run manifest and records the
    run id in runs.txt

    Args:
        |   handle: run handle created by initialise

    Returns:
        |   str: path of the manifest
    """
    for output in handle.get("output", {}).values():
        if not sns_utils.is_file(output["path"]):
            raise ValueError(
                f"Error: output {output['data_product']} was declared but "
                f"{output['path']} was not written"
            )
        output["hash"] = sns_utils.get_file_hash(output["path"])
        logging.info(
            WRITING_STR.format(output["data_product"], output["path"])
        )

    for input in handle.get("input", {}).values():
        if sns_utils.is_file(input["path"]):
            input["hash"] = sns_utils.get_file_hash(input["path"])

    handle["finished"] = str(datetime.datetime.now())
    manifest_path = os.path.join(
        handle["output_dir"], "manifest-" + handle["run_id"] + ".yaml"
    ).replace("\\", "/")
    sns_utils.write_yaml(manifest_path, manifest(handle))
    handle["manifest"] = manifest_path
    logging.info(WRITING_STR.format("manifest", manifest_path))

    runs_path = os.path.join(handle["output_dir"], RUNS_FILE)
    runs_path = runs_path.replace("\\", "/")

    with open(runs_path, "a+") as runs_file:
        runs_file.seek(0)
        data = runs_file.read(100)
        if len(data) > 0:
            runs_file.write("\n")
        runs_file.write(handle["run_id"])

    return manifest_path
