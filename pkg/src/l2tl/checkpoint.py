"""Binary dump of named float64 arrays plus a JSON header.

Layout (all integers little-endian)::

    bytes 0-7    magic b"L2TLCKPT"
    bytes 8-11   uint32 format version (currently 1)
    bytes 12-15  uint32 header length H
    next H       UTF-8 JSON header: {"kind", "meta", "tensors": [{"name", "shape"}]}
    rest         float64 little-endian payloads, in header order, row-major

The header is written with sorted keys so equal contents give equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"L2TLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    tensors = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps({"kind": kind, "meta": meta, "tensors": tensors},
                        sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    chunks += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values()]
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path, kind: str) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header['kind']}")
    offset = 16 + hlen
    arrays = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at tensor {t['name']!r}")
        arrays[t["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(t["shape"]).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, header["meta"]
