"""Binary checkpoint container.

Layout (all integers u32 little-endian)::

    b"MGP1" | version | record count | records...
    record: name length | UTF-8 name | ndim | dims... | float32 LE payload

Non-tensor state (configs, vocabularies) rides along as JSON bytes stored
one byte per float32 element under the ``meta.`` prefix, so the file stays a
single flat list of named tensors.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, VersionError

MAGIC = b"MGP1"
VERSION = 1
META_PREFIX = "meta."
_U32 = struct.Struct("<I")


def encode_meta(obj) -> np.ndarray:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def decode_meta(arr: np.ndarray):
    a = np.asarray(arr)
    if a.ndim != 1 or (a.size and (a.min() < 0 or a.max() > 255 or np.any(a != np.rint(a)))):
        raise FormatError("meta record is not a byte string")
    try:
        return json.loads(a.astype(np.uint8).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"meta record is not valid JSON: {e}") from None


def write_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray],
                     meta: Mapping[str, object] | None = None) -> None:
    """Write ``tensors`` (sorted by name) plus ``meta.<key>`` JSON records."""
    records = {n: np.asarray(a) for n, a in tensors.items()}
    for key, value in (meta or {}).items():
        records[META_PREFIX + key] = encode_meta(value)
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(records))]
    for name in sorted(records):
        arr = np.asarray(records[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        parts += [_U32.pack(len(raw_name)), raw_name, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, object]]:
    """(tensors, meta) from a checkpoint file; raises FormatError/VersionError."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from None
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(data):
            raise FormatError(f"{path}: truncated at byte {pos}")
        (v,) = _U32.unpack_from(data, pos)
        pos += 4
        return v

    version = u32()
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    count = u32()
    tensors, meta = {}, {}
    for _ in range(count):
        n = u32()
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated record name")
        try:
            name = data[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: record name is not UTF-8") from None
        pos += n
        dims = tuple(u32() for _ in range(u32()))
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims)
        pos += nbytes
        if name in tensors or name[len(META_PREFIX):] in meta:
            raise FormatError(f"{path}: duplicate record {name!r}")
        if name.startswith(META_PREFIX):
            meta[name[len(META_PREFIX):]] = decode_meta(arr)
        else:
            tensors[name] = arr.astype(np.float32)
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return tensors, meta


def restore_params(params, tensors: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Copy checkpoint tensors into ``params``; names must match exactly."""
    have = {n for n in tensors if n.startswith(prefix)}
    want = set(params.names(prefix))
    unknown, missing = sorted(have - want), sorted(want - have)
    if unknown:
        raise FormatError(f"checkpoint has unknown tensors: {unknown}")
    if missing:
        raise FormatError(f"checkpoint lacks tensors: {missing}")
    for n in sorted(have):
        if tuple(tensors[n].shape) != params[n].shape:
            raise FormatError(f"{n}: checkpoint shape {tensors[n].shape} != model shape {params[n].shape}")
        params.set(n, tensors[n])
