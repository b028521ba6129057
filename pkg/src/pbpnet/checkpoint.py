"""Binary parameter checkpoints.

Layout: the 8 magic bytes ``PBPCKPT1`` followed by one record per parameter
until end of file. A record is::

    u32 name length | UTF-8 name | u32 rank | u64 dim * rank | u32 dtype | data

All integers and data are little-endian; dtype 0 is float32.
"""

import struct

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"PBPCKPT1"
DTYPES = {0: np.dtype("<f4")}
DTYPE_CODES = {np.dtype("float32"): 0}


def encode(params):
    """Serialise an ordered name -> array mapping to bytes."""
    chunks = [MAGIC]
    for name, value in params.items():
        arr = np.asarray(value)
        code = DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointFormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<I", code))
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(chunks)


def decode(blob):
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("bad magic: not a PBPCKPT1 checkpoint")
    view = memoryview(blob)
    pos = len(MAGIC)
    params = {}

    def read(fmt, what):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointFormatError(f"truncated record while reading {what}")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    while pos < len(view):
        (name_len,) = read("<I", "name length")
        if pos + name_len > len(view):
            raise CheckpointFormatError("truncated record while reading name")
        try:
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"parameter name is not UTF-8: {exc}") from None
        pos += name_len
        (rank,) = read("<I", f"{name} rank")
        dims = read(f"<{rank}Q", f"{name} dims") if rank else ()
        (code,) = read("<I", f"{name} dtype")
        if code not in DTYPES:
            raise CheckpointFormatError(f"{name}: unknown dtype code {code}")
        dtype = DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(view):
            raise CheckpointFormatError(f"truncated record while reading {name} data")
        params[name] = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(dims).astype(np.float32)
        pos += nbytes
    return params


def save_checkpoint(params, path):
    with open(path, "wb") as fh:
        fh.write(encode(params))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
