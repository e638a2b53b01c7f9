"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DDSRCKPT"            magic, 8 bytes
    u32 version            currently 1
    u32 meta_len, bytes    UTF-8 ``key=value`` lines
    u32 count
    count x:
        u32 name_len, bytes name (UTF-8)
        u32 ndim, ndim x u64 extents
        raw float64 '<f8' buffer, C order
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"DDSRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for k, v in (meta or {}).items():
        if "\n" in f"{k}{v}" or "=" in k or not k:
            raise CheckpointError(f"metadata entry {k!r}={v!r} cannot be stored as a key=value line")
    meta_blob = "".join(f"{k}={v}\n" for k, v in (meta or {}).items()).encode("utf-8")
    out.append(struct.pack("<I", len(meta_blob)))
    out.append(meta_blob)
    out.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_checkpoint(blob: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict[str, str]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a ddsr checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = take("<I")
    meta_text = blob[pos:pos + meta_len].decode("utf-8")
    pos += meta_len
    meta = {}
    for line in meta_text.split("\n")[:-1]:
        key, _, value = line.partition("=")
        meta[key] = value
    (count,) = take("<I")
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = take("<I")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if pos + nbytes > len(blob):
            raise CheckpointError(f"truncated buffer for {name!r}")
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last parameter")
    return params, meta


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, meta))
    return path


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict[str, str]]:
    return decode_checkpoint(Path(path).read_bytes())
