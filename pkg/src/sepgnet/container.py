"""Binary tensor container used for checkpoints and dataset files.

Each record is: an 8-byte magic, a little-endian uint32 header length, the
ASCII header "dtype=f32;shape=d0,d1,...", then the row-major float32 payload
(little-endian). A file may hold any number of records back to back; readers
consume records until end of file.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SGTENSR1"


class ContainerFormatError(ValueError):
    """Raised on malformed or truncated container data."""


def write_tensor(fh, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.float32)
    header = ("dtype=f32;shape=" + ",".join(str(d) for d in array.shape)).encode("ascii")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(header)))
    fh.write(header)
    fh.write(array.astype("<f4", copy=False).tobytes())


def read_tensor(fh) -> np.ndarray | None:
    """Read one record; returns None at a clean end of file."""
    magic = fh.read(len(MAGIC))
    if len(magic) == 0:
        return None
    if magic != MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}")
    raw_len = fh.read(4)
    if len(raw_len) != 4:
        raise ContainerFormatError("truncated header length")
    (hlen,) = struct.unpack("<I", raw_len)
    header = fh.read(hlen)
    if len(header) != hlen:
        raise ContainerFormatError("truncated header")
    try:
        fields = dict(item.split("=", 1) for item in header.decode("ascii").split(";"))
        dtype = fields["dtype"]
        shape = tuple(int(d) for d in fields["shape"].split(",")) if fields["shape"] else ()
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ContainerFormatError(f"bad header {header!r}") from exc
    if dtype != "f32":
        raise ContainerFormatError(f"unsupported dtype {dtype!r}")
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(count * 4)
    if len(payload) != count * 4:
        raise ContainerFormatError("truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensors(path, arrays) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    for arr in arrays:
        write_tensor(buf, arr)
    path.write_bytes(buf.getvalue())


def load_tensors(path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while True:
            arr = read_tensor(fh)
            if arr is None:
                break
            out.append(arr)
    return out
