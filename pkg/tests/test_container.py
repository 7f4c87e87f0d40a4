import io

import numpy as np
import pytest

from sepgnet.container import (
    MAGIC,
    ContainerFormatError,
    load_tensors,
    read_tensor,
    save_tensors,
    write_tensor,
)


def test_round_trip_single(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np.float32)
    path = tmp_path / "one.bin"
    save_tensors(path, [arr])
    (back,) = load_tensors(path)
    np.testing.assert_array_equal(back, arr)
    assert back.dtype == np.float32


def test_round_trip_many(tmp_path):
    rng = np.random.default_rng(1)
    arrays = [
        rng.standard_normal((2, 2)).astype(np.float32),
        rng.standard_normal(7).astype(np.float32),
        np.arange(6, dtype=np.float32).reshape(1, 2, 3),
    ]
    path = tmp_path / "many.bin"
    save_tensors(path, arrays)
    back = load_tensors(path)
    assert len(back) == 3
    for a, b in zip(arrays, back):
        np.testing.assert_array_equal(a, b)


def test_bytes_are_stable(tmp_path):
    arr = np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 4)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_tensors(p1, [arr])
    save_tensors(p2, [arr])
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic():
    buf = io.BytesIO(b"WRONGMAG" + b"\x00" * 16)
    with pytest.raises(ContainerFormatError):
        read_tensor(buf)


def test_truncated_payload():
    buf = io.BytesIO()
    write_tensor(buf, np.ones((4, 4), dtype=np.float32))
    data = buf.getvalue()[:-8]
    with pytest.raises(ContainerFormatError):
        read_tensor(io.BytesIO(data))


def test_truncated_header():
    buf = io.BytesIO(MAGIC + b"\xff\xff\xff\x7f" + b"dtype")
    with pytest.raises(ContainerFormatError):
        read_tensor(buf)


def test_garbled_header():
    buf = io.BytesIO()
    header = b"nonsense-header"
    import struct

    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    with pytest.raises(ContainerFormatError):
        read_tensor(io.BytesIO(buf.getvalue()))


def test_clean_eof_returns_none():
    assert read_tensor(io.BytesIO(b"")) is None
