"""Flat binary parameter container with a JSON provenance header.

Layout: magic, format version, length-prefixed JSON header (config plus
anything the caller wants archived), entry count, then per entry a
length-prefixed name, the shape, and a little-endian float32 payload.
Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PVLMCKPT"
VERSION = 1


def save_checkpoint(path, params: dict, header: dict | None = None):
    """Write named arrays (or parameter tensors) plus a JSON header."""
    blob = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob,
              struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.ascontiguousarray(getattr(value, "data", value), dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Read back (params dict of float32 arrays, header dict)."""
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    off = len(MAGIC)
    version, header_len = struct.unpack_from("<II", buf, off)
    off += 8
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[off: off + header_len].decode("utf-8"))
    off += header_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off: off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        params[name] = arr.copy()
    return params, header


def load_into(model, path, strict: bool = True):
    """Copy checkpoint entries into a model's parameters by name.

    Returns (loaded, missing, unexpected) name lists. ``missing`` are model
    parameters with no checkpoint entry, ``unexpected`` are checkpoint
    entries with no matching name/shape; with ``strict`` either is an error.
    This is also the hook for initializing from externally trained weights.
    """
    params, header = load_checkpoint(path)
    model_params = dict(model.named_parameters())
    loaded, unexpected = [], []
    for name, arr in params.items():
        target = model_params.get(name)
        if target is None or target.data.shape != arr.shape:
            unexpected.append(name)
            continue
        target.data = arr.astype(target.data.dtype)
        loaded.append(name)
    missing = sorted(set(model_params) - set(loaded))
    if strict and (missing or unexpected):
        raise ValueError(f"checkpoint mismatch: missing={missing}, "
                         f"unexpected={unexpected}")
    return loaded, missing, unexpected, header
