import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixeldistill import tensorio
from pixeldistill.fnv import fnv1a64, fnv1a64_file, fnv1a64_str, StreamingFnv


def test_round_trip_basic():
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    buf = tensorio.tensor_bytes(arr)
    back, end = tensorio.tensor_from_buffer(buf)
    assert end == len(buf) == tensorio.tensor_byte_size(arr.shape)
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)


def test_read_tensor_from_file_object():
    arr = np.float32([[1.5, -2.25], [0.0, 3.0]])
    f = io.BytesIO(tensorio.tensor_bytes(arr))
    back = tensorio.read_tensor(f)
    assert np.array_equal(back, arr)


def test_bad_magic_rejected():
    with pytest.raises(tensorio.ContainerError, match="magic"):
        tensorio.tensor_from_buffer(b"XXXX" + b"\x00" * 16)


def test_truncated_payload_rejected():
    buf = tensorio.tensor_bytes(np.ones(10, dtype=np.float32))
    with pytest.raises(tensorio.ContainerError, match="truncated"):
        tensorio.tensor_from_buffer(buf[:-4])


def test_unknown_dtype_tag_rejected():
    buf = bytearray(tensorio.tensor_bytes(np.ones(2, dtype=np.float32)))
    buf[12] = 7  # dtype tag position for a 1-d tensor
    with pytest.raises(tensorio.ContainerError, match="dtype"):
        tensorio.tensor_from_buffer(bytes(buf))


def test_ensure_finite():
    tensorio.ensure_finite(np.zeros(3))
    with pytest.raises(ValueError, match="non-finite"):
        tensorio.ensure_finite(np.float32([1.0, np.nan]))
    with pytest.raises(ValueError, match="non-finite"):
        tensorio.ensure_finite(np.float32([np.inf]))


@settings(max_examples=40)
@given(shape=st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=4),
       seed=st.integers(min_value=0, max_value=2**32))
def test_round_trip_random_shapes(shape, seed):
    rng = np.random.default_rng(seed)
    arr = rng.standard_normal(shape).astype(np.float32)
    back, _ = tensorio.tensor_from_buffer(tensorio.tensor_bytes(arr))
    assert back.shape == tuple(shape)
    assert np.array_equal(back, arr)


def test_two_tensors_in_sequence():
    a = np.float32([1, 2, 3])
    b = np.float32([[4], [5]])
    buf = tensorio.tensor_bytes(a) + tensorio.tensor_bytes(b)
    got_a, off = tensorio.tensor_from_buffer(buf)
    got_b, end = tensorio.tensor_from_buffer(buf, off)
    assert end == len(buf)
    assert np.array_equal(got_a, a) and np.array_equal(got_b, b)


# --- fnv ---

def test_fnv_known_vectors():
    # standard FNV-1a 64-bit test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64_str("foobar") == 0x85944171F73967E8


def test_fnv_chaining_and_streaming(tmp_path):
    data = bytes(range(256)) * 13
    whole = fnv1a64(data)
    s = StreamingFnv()
    s.update(data[:100]).update(data[100:])
    assert s.digest == whole
    p = tmp_path / "blob.bin"
    p.write_bytes(data)
    assert fnv1a64_file(p, chunk_size=64) == whole
