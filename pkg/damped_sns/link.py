import logging
import os
from typing import Optional


def link_write(
    handle: dict,
    data_product: str,
    file_type: str = "csv",
    description: Optional[str] = None,
) -> str:
    """Reads write information in config file, updates handle with relevant
    metadata and returns path to write data product to.

    Args:
        |   data_product: Specified name of data product in config.
        |   file_type: extension used when the config does not declare one.
        |   description: description used when the config does not declare one.

    Returns:
        |   path: Path to write data product to.
    """

    # If data product is already in handle, return path
    if "output" in handle:
        for output in handle["output"].values():
            if output["data_product"] == data_product:
                return output["path"]

    # Declared write blocks take precedence over the defaults
    declared = [
        entry
        for entry in handle["yaml"].get("write", [])
        if entry["data_product"] == data_product
    ]
    if declared:
        write = declared[0]
        file_type = write.get("file_type", file_type)
        description = write.get("description", description)
    else:
        logging.info(
            "Write information for {} not in config, using defaults".format(
                data_product
            )
        )

    # Output names are deterministic
    filename = data_product + "." + file_type
    path = os.path.join(handle["output_dir"], filename).replace("\\", "/")

    # Create directory structure if it doesn't exist
    directory = os.path.dirname(path)

    if directory and not os.path.exists(directory):
        os.makedirs(directory)

    # Create metadata dict
    output_dict = {
        "data_product": data_product,
        "file_type": file_type,
        "path": path,
        "description": description,
    }

    # If output exists in handle, append new metadata, otherwise create dict
    if "output" in handle:
        key = "output_" + str(len(handle["output"]))
        handle["output"][key] = output_dict
    else:
        handle["output"] = {}
        handle["output"]["output_0"] = output_dict

    return path


def link_read(handle: dict, data_product: str) -> str:
    """Reads 'read' information in config file, updates handle with relevant
    metadata and returns path to read data product from.

    Args:
        |   data_product: Specified name of data product in config.

    Returns:
        |   path: Path to read data product from.
    """

    # If data product is already in handle, return path
    if "input" in handle:
        for index in handle["input"].keys():
            if handle["input"][index]["data_product"] == data_product:
                return handle["input"][index]["path"]
    if "read" not in handle["yaml"].keys():
        raise ValueError(
            "Error: Read has not been specified in the given config file"
        )

    # Check if data product is in config yaml
    declared = [
        entry
        for entry in handle["yaml"]["read"]
        if entry["data_product"] == data_product
    ]
    if not declared:
        raise ValueError(
            f"Error: read information for {data_product} not in config"
        )

    read = declared[0]
    if "path" not in read:
        raise ValueError(f"Error: no path given to read {data_product}")

    path = read["path"]
    if not os.path.isabs(path):
        path = os.path.join(handle["config_dir"], path)
    path = path.replace("\\", "/")

    if not os.path.isfile(path):
        raise ValueError(f"Error: {data_product} not found at {path}")

    input_dict = {
        "data_product": data_product,
        "path": path,
    }

    if "input" in handle:
        key = "input_" + str(len(handle["input"]))
        handle["input"][key] = input_dict
    else:
        handle["input"] = {}
        handle["input"]["input_0"] = input_dict

    return path
