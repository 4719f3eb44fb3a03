"""Binary parameter container.

Layout (little-endian)::

    b"VLTW"  u32 version  u32 count
    count x { u32 name_len, name (utf-8), u32 ndim, ndim x u32 dim, float64 payload }

A plain-text manifest (``<path>.manifest``) lists ``name<TAB>shape`` per line.
"""

import struct

import numpy as np

MAGIC = b"VLTW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, state, manifest=True):
    """Write ``state`` (ordered name -> array mapping) to ``path``."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    if manifest:
        with open(f"{path}.manifest", "w") as fh:
            for name, arr in state.items():
                fh.write(f"{name}\t{'x'.join(str(d) for d in np.shape(arr))}\n")


def load(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    state = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            state[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated container") from exc
    return state
