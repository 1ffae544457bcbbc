"""64-bit FNV-1a hashing, used for artifact checksums and provenance ids."""

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data, h=FNV_OFFSET):
    """Hash a bytes-like object; pass a previous digest as ``h`` to chain chunks."""
    for byte in bytes(data):
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


def fnv1a64_str(text):
    return fnv1a64(text.encode("utf-8"))


def fnv1a64_file(path, chunk_size=1 << 20):
    h = FNV_OFFSET
    with open(path, "rb") as f:
        while True:
            chunk = f.read(chunk_size)
            if not chunk:
                break
            h = fnv1a64(chunk, h)
    return h


class StreamingFnv:
    """Incremental FNV-1a, for hashing while writing a file."""

    def __init__(self):
        self.digest = FNV_OFFSET

    def update(self, data):
        self.digest = fnv1a64(data, self.digest)
        return self


def hex64(h):
    return f"{h:016x}"
