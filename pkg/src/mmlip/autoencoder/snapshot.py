"""Binary model snapshots.

Layout: 8-byte magic, little-endian uint32 format version, little-endian
uint64 header length, a UTF-8 JSON header, then every parameter as
little-endian float64 in row-major order, in header order. The header is
written with sorted keys, so equal models give byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import InvalidInputError
from .model import ModelSpec, MultimodalAutoencoder

MAGIC = b"MMLIPSNP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def to_bytes(model: MultimodalAutoencoder, meta: dict | None = None) -> bytes:
    names = model.param_names()
    header = {
        "byte_order": "little",
        "dtype": "float64",
        "layout": "row-major",
        "spec": model.spec.to_dict(),
        "params": [[k, list(model.params[k].shape)] for k in names],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes() for k in names)
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + body


def from_bytes(blob: bytes) -> tuple[MultimodalAutoencoder, dict]:
    if len(blob) < _PREFIX.size:
        raise InvalidInputError("snapshot is truncated")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise InvalidInputError("not a model snapshot (bad magic)")
    if version != VERSION:
        raise InvalidInputError(f"unsupported snapshot version {version}")
    start = _PREFIX.size
    header = json.loads(blob[start:start + hlen].decode())
    off = start + hlen
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(blob):
            raise InvalidInputError("snapshot is truncated")
        params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off = end
    if off != len(blob):
        raise InvalidInputError("snapshot has trailing bytes")
    return MultimodalAutoencoder(ModelSpec.from_dict(header["spec"]), params), header["meta"]


def save(model: MultimodalAutoencoder, path, meta: dict | None = None) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model, meta))
    os.replace(tmp, path)
    return path


def load(path) -> tuple[MultimodalAutoencoder, dict]:
    return from_bytes(Path(path).read_bytes())
