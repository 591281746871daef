"""Binary tensor file format.

Layout (all integers little-endian)::

    b"PACT"  u32 version
    repeated until EOF:
        u32 name_len, name (UTF-8)
        u32 rank, rank x u64 extents
        prod(extents) x f64 payload

A model configuration travels as a leading rank-1, zero-length record whose
name is ``"@config:"`` followed by the JSON-encoded configuration.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ParseError

MAGIC = b"PACT"
VERSION = 1
CONFIG_PREFIX = "@config:"


def dumps(tensors: Mapping[str, np.ndarray], config: Mapping[str, Any] | None = None) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    records: list[tuple[str, np.ndarray]] = []
    if config is not None:
        records.append((CONFIG_PREFIX + json.dumps(dict(config), sort_keys=True), np.zeros(0)))
    records.extend(tensors.items())
    for name, arr in records:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any] | None]:
    if buf[:4] != MAGIC:
        raise ParseError("not a PACT tensor file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ParseError(f"unsupported PACT version {version}")
    pos = 8
    tensors: dict[str, np.ndarray] = {}
    config: dict[str, Any] | None = None
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            if pos + 8 * count > len(buf):
                raise ParseError(f"truncated payload for {name!r}")
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
            if name.startswith(CONFIG_PREFIX):
                config = json.loads(name[len(CONFIG_PREFIX) :])
            else:
                tensors[name] = arr
    except struct.error as exc:
        raise ParseError(f"truncated record: {exc}") from None
    return tensors, config


def save(path: str | Path, tensors: Mapping[str, np.ndarray], config: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, config))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any] | None]:
    return loads(Path(path).read_bytes())
