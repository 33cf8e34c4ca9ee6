"""Binary checkpoint container.

Layout: magic ``MIMR1``, 32-byte config digest, u32 tensor count, then per
tensor a u16 name length, the utf-8 name, u32 rows, u32 cols and rows*cols
little-endian f64 values.  All integers are little-endian.
"""

import struct

import numpy as np

from .errors import DataError

MAGIC = b"MIMR1"


def save_checkpoint(path, tensors, config_digest):
    if len(config_digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(config_digest)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(getattr(tensors[name], "data", tensors[name]), dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path):
    """Returns (config digest, {name: ndarray})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise DataError(f"{path}: truncated at byte {pos}")
        out = blob[pos:pos + n]
        pos += n
        return out

    digest = take(32)
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        tensors[name] = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).copy()
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes")
    return digest, tensors
