"""Binary checkpoint format.

Layout (little-endian)::

    b"MCNN" | u32 version | u32 spec_len | spec JSON (utf-8) | u32 n_arrays
    then per array: u16 name_len | name | u32 ndim | u64 shape[ndim] | f64 data
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import ModelParams, ModelSpec

MAGIC = b"MCNN"
VERSION = 1


def save_checkpoint(path, spec, params, extra=None):
    doc = {"model": spec.to_dict(), "kind": spec.kind}
    if extra:
        doc["extra"] = extra
    text = json.dumps(doc, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text]
    named = params.named()
    parts.append(struct.pack("<I", len(named)))
    for name, arr in named.items():
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    """Returns ``(spec, params, extra)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    doc = json.loads(data[off : off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    spec = ModelSpec.from_dict(doc["model"])
    return spec, ModelParams.from_named(spec, arrays), doc.get("extra", {})
