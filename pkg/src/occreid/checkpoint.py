"""Versioned binary container of named tensors.

Layout (little-endian)::

    b"OCCREIDCKPT\\n"            magic
    u32 version
    u32 header length
    header                      UTF-8 JSON: metadata + tensor index
    payload                     row-major tensor bytes, in index order

Each index entry records ``name``, ``dtype``, ``shape``, ``offset`` and
``nbytes`` (offset relative to the payload start).
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LoadError

MAGIC = b"OCCREIDCKPT\n"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes(order="C")
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": ckpt.meta, "tensors": index}, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(MAGIC):
        raise LoadError(f"{path} is not a checkpoint (bad magic)")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<II", data, pos)
    if version != VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except ValueError as exc:
        raise LoadError(f"{path}: corrupt header") from exc
    base = pos + hlen
    tensors = {}
    for ent in header["tensors"]:
        start = base + ent["offset"]
        raw = data[start:start + ent["nbytes"]]
        if len(raw) != ent["nbytes"]:
            raise LoadError(f"{path}: truncated payload for tensor {ent['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"])
        tensors[ent["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return Checkpoint(tensors, header.get("meta", {}))
