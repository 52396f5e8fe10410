"""Binary named-array container.

Layout (all integers little-endian u32)::

    b"UNDF" | version | meta_len | meta (canonical JSON, utf-8)
    repeated: name_len | name | rank | dims[rank] | float32 payload

The metadata records the array count so a file cut at a record boundary is
still detected as truncated.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"UNDF"
VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def encode_container(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    meta = dict(meta, n_arrays=len(arrays))
    mb = canonical_json(meta).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(mb)), mb]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")  # tobytes() is C-order; ascontiguousarray would promote 0-d to 1-d
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def write_container(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_container(meta, arrays))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.source}: truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_container(buf: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf, source)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{source}: bad magic bytes, not a container file")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version} (expected {VERSION})")
    mlen = r.u32("metadata length")
    try:
        meta = json.loads(r.take(mlen, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt metadata block ({exc})") from None
    if not isinstance(meta, dict) or "n_arrays" not in meta:
        raise CheckpointError(f"{source}: metadata lacks array count")
    arrays: dict[str, np.ndarray] = {}
    for i in range(int(meta["n_arrays"])):
        nlen = r.u32(f"name length of record {i}")
        try:
            name = r.take(nlen, f"name of record {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{source}: record {i} has a corrupt name") from None
        rank = r.u32(f"rank of {name!r}")
        if rank > 16:
            raise CheckpointError(f"{source}: implausible rank {rank} for {name!r}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name!r}"))
        count = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * count, f"payload of {name!r}")
        if name in arrays:
            raise CheckpointError(f"{source}: duplicate array name {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - r.pos} unexpected trailing bytes")
    return meta, arrays


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    return decode_container(buf, str(path))
