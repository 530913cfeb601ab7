"""Binary slice-payload format.

A payload file is a small header followed by the raw array:

* bytes 0..3   magic ``EPB1``
* byte  4      rank (number of dimensions)
* byte  5      dtype code: 0 = uint8 label map, 1 = float32 image
* bytes 6..7   reserved (zero)
* rank * u32   little-endian dimensions
* data         row-major little-endian array values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"EPB1"
DTYPE_LABELS = 0
DTYPE_IMAGE = 1

_DTYPE_OF_CODE = {DTYPE_LABELS: np.dtype("<u1"), DTYPE_IMAGE: np.dtype("<f4")}


class PayloadError(ValueError):
    """Raised for missing, truncated, or inconsistent payload files."""


def write_payload(path, array):
    """Write ``array`` (uint8 labels or float32 image) to ``path``."""
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.uint8:
        code = DTYPE_LABELS
    elif arr.dtype == np.float32:
        code = DTYPE_IMAGE
    else:
        raise PayloadError(
            f"unsupported payload dtype {arr.dtype}; expected uint8 labels or float32 image"
        )
    if arr.ndim < 1 or arr.ndim > 255:
        raise PayloadError(f"unsupported rank {arr.ndim}")
    header = MAGIC + struct.pack("<BBH", arr.ndim, code, 0)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(_DTYPE_OF_CODE[code], copy=False).tobytes())


def read_payload(path):
    """Read a payload file back into an array (uint8 or float32)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise PayloadError(f"{path}: cannot read payload: {exc}") from exc
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise PayloadError(f"{path}: missing or corrupt header")
    rank, code, _reserved = struct.unpack_from("<BBH", blob, 4)
    if code not in _DTYPE_OF_CODE:
        raise PayloadError(f"{path}: unknown dtype code {code}")
    if len(blob) < 8 + 4 * rank:
        raise PayloadError(f"{path}: truncated dimension table")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    dtype = _DTYPE_OF_CODE[code]
    data = blob[8 + 4 * rank :]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) != expected:
        raise PayloadError(f"{path}: payload is {len(data)} bytes, header implies {expected}")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def payload_dtype_code(path):
    """Peek at the dtype code of a payload file without reading the data."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if len(head) < 8 or head[:4] != MAGIC:
        raise PayloadError(f"{path}: missing or corrupt header")
    return head[5]
