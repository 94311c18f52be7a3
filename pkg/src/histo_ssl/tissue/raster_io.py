import pathlib

import numpy as np
import numpy.typing as npt

from histo_ssl.errors import DataError, DimensionError

PPM_MAGIC = b"P6"


def write_ppm(path: pathlib.Path, raster: npt.NDArray[np.uint8]) -> None:
    """Write an H x W x 3 uint8 raster as binary PPM (P6, maxval 255)."""
    if raster.dtype != np.uint8 or raster.ndim != 3 or raster.shape[2] != 3:
        raise DimensionError(
            f"PPM rasters must be H x W x 3 uint8, got {raster.shape} {raster.dtype}"
        )
    h, w = raster.shape[:2]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(PPM_MAGIC + f"\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(raster).tobytes())


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping '#' comments."""
    length = len(data)
    while pos < length:
        if data[pos : pos + 1].isspace():
            pos += 1
        elif data[pos : pos + 1] == b"#":
            while pos < length and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < length and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_ppm(path: pathlib.Path) -> npt.NDArray[np.uint8]:
    if not path.exists():
        raise DataError(f"tile raster not found: {path}", missing_path=True)
    data = path.read_bytes()
    magic, pos = _read_token(data, 0)
    if magic != PPM_MAGIC:
        raise DataError(f"not a binary PPM file: {path}")
    width, pos = _read_token(data, pos)
    height, pos = _read_token(data, pos)
    maxval, pos = _read_token(data, pos)
    if int(maxval) != 255:
        raise DataError(f"only 8-bit PPM is supported, got maxval {int(maxval)}")
    # exactly one whitespace byte separates the header from the payload
    pos += 1
    w, h = int(width), int(height)
    payload = data[pos : pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise DataError(f"truncated PPM payload in {path}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()
