import logging
import os
from typing import Any

import yaml

from precoder.constants import THREADS_ENV_VAR


def configure_logging(debug: bool = False):
    logging.basicConfig(
        level=logging.DEBUG if debug else logging.INFO,
        format="%(asctime)s.%(msecs)03d - %(message)s",
        datefmt="%H:%M:%S",
    )


def thread_count() -> int:
    """Worker cap from PRECODER_THREADS, defaulting to all cores."""
    value = os.environ.get(THREADS_ENV_VAR)
    if value is None:
        return os.cpu_count() or 1
    try:
        threads = int(value)
    except ValueError:
        raise ValueError(f"{THREADS_ENV_VAR} must be a positive integer but got {value!r}")
    if threads < 1:
        raise ValueError(f"{THREADS_ENV_VAR} must be a positive integer but got {threads}")
    return threads


def load_yaml(path: str) -> dict[str, Any]:
    with open(path) as f:
        try:
            content = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ValueError(f"Cannot parse {path}: {e}")
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise ValueError(f"Expected a mapping at the top level of {path}")
    return content


def dump_yaml(path: str, content: dict[str, Any]) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(content, f, sort_keys=False)
    logging.debug(f"Wrote {path}")


def check_keys(section: str, given: dict[str, Any], allowed: set[str]) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ValueError(f"Unknown keys in {section}: {sorted(unknown)}")
