import csv
import hashlib
import os
import uuid
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from typing import Any, Callable, Iterable, List, Optional, Sequence

import yaml

CSV_FLOAT_FORMAT = "%.17g"


def get_file_hash(
    path: str,
) -> str:
    """
    Internal function to return a files sha1 hash
    Args:
        |   path: str file path
    Returns:
        |   str: sha1 hash
    """
    with open(path, "rb") as data:
        _data = data.read()
    hashed = hashlib.sha1(_data)

    return hashed.hexdigest()


def is_file(filename: str) -> bool:
    """
    Internal function to check whether a file exists
    Args:
        |   filename: file to check
    Returns:
        |   boolean: whether the file exists
    """
    return os.path.isfile(filename)


def generate_uuid() -> str:
    """
    Internal function returning a time-prefixed unique run identifier
    Returns:
        |   str: a random unique identifier
    """
    return datetime.now().strftime("%Y%m-%d%H-%M%S-") + str(uuid.uuid4())


def format_float(value: float) -> str:
    """
    Internal function formatting a float with 17 significant digits, the
    precision that round-trips every double
    """
    return CSV_FLOAT_FORMAT % value


def write_csv(
    path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]
) -> str:
    """
    Internal function to write rows to a csv file, floats at full precision
    Args:
        |   path: output path, parent directories are created
        |   header: column names
        |   rows: iterable of row sequences
    Returns:
        |   str: the path written
    """
    ensure_parent(path)
    with open(path, "w", newline="") as csv_file:
        writer = csv.writer(csv_file, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(
            [format_float(v) if isinstance(v, float) else v for v in row]
            for row in rows
        )
    return path


def read_csv(path: str) -> tuple:
    """
    Internal function to read a csv written by write_csv
    Returns:
        |   tuple: (header list, list of row lists of strings)
    """
    with open(path, "r", newline="") as csv_file:
        lines = [row for row in csv.reader(csv_file) if row]
    if not lines:
        raise ValueError(f"Empty csv file: {path}")
    return lines[0], lines[1:]


def write_yaml(path: str, data: dict) -> str:
    """
    Internal function to dump a report dictionary as YAML
    """
    ensure_parent(path)
    with open(path, "w") as yaml_file:
        yaml.safe_dump(data, yaml_file, sort_keys=False)
    return path


def ensure_parent(path: str) -> None:
    directory = os.path.dirname(path)
    if directory and not os.path.exists(directory):
        os.makedirs(directory)


def plain(value: Any) -> Optional[Any]:
    """
    Internal function converting numpy scalars, tuples and nested
    containers into YAML-safe builtins
    """
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if hasattr(value, "tolist"):
        return plain(value.tolist())
    if isinstance(value, float) and value != value:
        return "nan"
    if isinstance(value, float) and value in (float("inf"), float("-inf")):
        return "inf" if value > 0 else "-inf"
    return value


def map_ordered(
    function: Callable[[Any], Any], tasks: Sequence[Any], workers: int = 1
) -> List[Any]:
    """
    Internal function applying a module-level function to every task,
    optionally in worker processes
    Args:
        |   function: picklable task function
        |   tasks: task arguments
        |   workers: number of worker processes, 1 runs in process
    Returns:
        |   list: results in task order, whatever the worker count
    """
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    if workers == 1 or len(tasks) < 2:
        return [function(task) for task in tasks]
    chunksize = max(1, len(tasks) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(function, tasks, chunksize=chunksize))
