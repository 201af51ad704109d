"""Binary weight checkpoints.

Layout (all integers little-endian u32)::

    b"SSCF" | version | record*

    record := name_len | utf-8 name | rank | dims[rank] | f64 payload (LE)

Records run to end of file.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SSCF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    state: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 8 * count
            if end > len(blob):
                raise CheckpointError(f"record {name!r} truncated")
            state[name] = np.frombuffer(blob[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
            pos = end
    except struct.error as exc:
        raise CheckpointError(f"malformed record at byte {pos}: {exc}") from exc
    return state


def save(path, state: dict[str, np.ndarray]) -> str:
    """Write ``state`` and return the sha256 content hash of the file."""
    blob = encode(state)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def content_hash(state: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(encode(state)).hexdigest()
