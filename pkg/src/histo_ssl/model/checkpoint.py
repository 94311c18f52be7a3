"""
PSSL1 checkpoint format.

Layout: the magic line ``PSSL1\\n``, one UTF-8 JSON header line, then the
tensor payloads as little-endian float32, concatenated in header order.
The header lists each tensor's name, shape and byte offset into the payload,
plus the resolved run configuration and free-form metadata. Tensors are
written in sorted name order and the JSON is key-sorted, so
save -> load -> save reproduces the file byte for byte.
"""

import json
import logging
import pathlib
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np
import numpy.typing as npt

from histo_ssl.errors import DataError

logger = logging.getLogger(__name__)

MAGIC = b"PSSL1\n"
PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    tensors: Dict[str, npt.NDArray[np.float32]]
    config: Dict[str, Any] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def subset(self, prefix: str) -> Dict[str, npt.NDArray[np.float32]]:
        """Tensors under ``prefix`` with the prefix stripped."""
        return {
            name[len(prefix) :]: value
            for name, value in self.tensors.items()
            if name.startswith(prefix)
        }


def save_checkpoint(
    path: pathlib.Path,
    tensors: Dict[str, npt.NDArray],
    config: Optional[Dict[str, Any]] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> None:
    entries = []
    offset = 0
    payloads = []
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype=PAYLOAD_DTYPE)
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        payloads.append(data.tobytes())
        offset += data.nbytes
    header = {"config": config or {}, "meta": meta or {}, "tensors": entries}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(header_bytes + b"\n")
        for payload in payloads:
            f.write(payload)
    tmp.replace(path)
    logger.debug(f"Saved {len(entries)} tensors to {path}")


def load_checkpoint(path: pathlib.Path) -> Checkpoint:
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}", missing_path=True)
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise DataError(f"not a PSSL1 checkpoint: {path}")
    try:
        header_end = data.index(b"\n", len(MAGIC))
    except ValueError as e:
        raise DataError(f"malformed checkpoint header in {path}") from e
    try:
        header = json.loads(data[len(MAGIC) : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"corrupt checkpoint header in {path}: {e}") from e

    payload = memoryview(data)[header_end + 1 :]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        end = start + count * PAYLOAD_DTYPE.itemsize
        if end > len(payload):
            raise DataError(f"truncated tensor {entry['name']} in {path}")
        tensors[entry["name"]] = (
            np.frombuffer(payload[start:end], dtype=PAYLOAD_DTYPE)
            .reshape(shape)
            .astype(np.float32)
        )
    return Checkpoint(tensors=tensors, config=header["config"], meta=header["meta"])
