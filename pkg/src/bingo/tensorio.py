"""Versioned tensor blobs: a version line, a length-prefixed JSON header, then
row-major little-endian float32 tensors in header order."""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np


class CheckpointError(ValueError):
    pass


def write_blob(path: str | os.PathLike, version: str, header: dict,
               tensors: Mapping[str, np.ndarray]) -> None:
    header = dict(header)
    header["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(version.encode("ascii") + b"\n")
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes(order="C"))


def read_blob(path: str | os.PathLike, version: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.find(b"\n")
    if nl < 0 or data[:nl].decode("ascii", "replace") != version:
        raise CheckpointError(f"{path}: expected a {version} checkpoint")
    pos = nl + 1
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 4 * count
        if end > len(data):
            raise CheckpointError(f"{path}: tensor {spec['name']} truncated")
        tensors[spec["name"]] = np.frombuffer(data[pos:end], dtype="<f4").reshape(shape).copy()
        pos = end
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return header, tensors
