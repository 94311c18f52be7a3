import json
import logging
import os
import pathlib

from histo_ssl.errors import ConfigError, DataError

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(level: int | str = logging.INFO) -> None:
    """Install the package-wide log format on the root logger."""
    logging.basicConfig(level=level, format=LOG_FORMAT)


def get_directory_size(path: pathlib.Path) -> int:
    """
    Get total size of a directory in bytes.
    """
    total_size = 0
    if not path.is_dir():
        raise DataError(f"Path not a directory: {path}", missing_path=True)
    for dirpath, dirnames, filenames in path.walk():
        for f in filenames:
            fp = os.path.join(dirpath, f)
            total_size += os.path.getsize(fp)

    return total_size


def read_json_file(path_to_file: pathlib.Path) -> dict:
    with open(path_to_file, "r") as f:
        return json.load(f)


def worker_count() -> int:
    """Number of data workers, read from HISTO_SSL_WORKERS (default 1)."""
    value = os.environ.get("HISTO_SSL_WORKERS", "1")
    try:
        workers = int(value)
    except ValueError:
        raise ConfigError(f"invalid HISTO_SSL_WORKERS value {value}") from None
    return max(1, workers)
