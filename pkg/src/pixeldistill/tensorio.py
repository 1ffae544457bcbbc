"""CDT1 tensor container: the on-disk carrier for every array in this package.

Layout (all integers little-endian):

    magic   4 bytes  b"CDT1"
    ndim    u32
    dims    u32 * ndim
    dtype   u8       (0 = float32; the only defined tag)
    payload raw little-endian float32, row-major

Arrays are float32 in files; ids/masks are stored as float32 holding small
integers.
"""

import struct

import numpy as np

MAGIC = b"CDT1"
DTYPE_F32 = 0


class ContainerError(ValueError):
    """Malformed or truncated container data."""


def ensure_finite(arr, what="tensor"):
    if not np.all(np.isfinite(arr)):
        bad = int(np.sum(~np.isfinite(arr)))
        raise ValueError(f"{what}: {bad} non-finite element(s)")
    return arr


def tensor_bytes(arr):
    """Serialize an array to CDT1 bytes (cast to float32, C order)."""
    a = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack("<I", a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    header += struct.pack("<B", DTYPE_F32)
    return header + a.tobytes()


def write_tensor(f, arr):
    f.write(tensor_bytes(arr))


def tensor_byte_size(shape):
    """Size in bytes of the CDT1 encoding of a float32 array of this shape."""
    n = 1
    for d in shape:
        n *= d
    return 4 + 4 + 4 * len(shape) + 1 + 4 * n


def tensor_from_buffer(buf, offset=0):
    """Decode one tensor from a bytes/memoryview; returns (array, next_offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise ContainerError(f"bad magic at offset {offset}: expected CDT1")
    pos = offset + 4
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if ndim > 32:
        raise ContainerError(f"implausible ndim {ndim} at offset {offset}")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    (tag,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if tag != DTYPE_F32:
        raise ContainerError(f"unknown dtype tag {tag} at offset {offset}")
    count = 1
    for d in shape:
        if d <= 0:
            raise ContainerError(f"non-positive dimension {d} at offset {offset}")
        count *= d
    end = pos + 4 * count
    if end > len(buf):
        raise ContainerError(
            f"truncated payload at offset {offset}: need {end - len(buf)} more bytes"
        )
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
    return arr, end


def read_tensor(f):
    """Read one tensor from an open binary file."""
    head = f.read(8)
    if len(head) < 8 or head[:4] != MAGIC:
        raise ContainerError("bad or truncated CDT1 header")
    (ndim,) = struct.unpack("<I", head[4:])
    if ndim > 32:
        raise ContainerError(f"implausible ndim {ndim}")
    rest = f.read(4 * ndim + 1)
    if len(rest) < 4 * ndim + 1:
        raise ContainerError("truncated CDT1 shape block")
    shape = struct.unpack(f"<{ndim}I", rest[: 4 * ndim])
    tag = rest[-1]
    if tag != DTYPE_F32:
        raise ContainerError(f"unknown dtype tag {tag}")
    count = 1
    for d in shape:
        count *= d
    payload = f.read(4 * count)
    if len(payload) < 4 * count:
        raise ContainerError("truncated CDT1 payload")
    return np.frombuffer(payload, dtype="<f4", count=count).reshape(shape).copy()
