"""Checkpoint container.

Layout (all integers little-endian)::

    magic    8 bytes   b"DITJSCC\\0"
    version  uint32    FORMAT_VERSION
    hlen     uint64    length of the JSON header in bytes
    header   hlen      UTF-8 JSON: {"config": ..., "tensors": [{name, dtype, shape, offset, nbytes}]}
    payload  ...       raw little-endian tensor bytes, concatenated in header order
    crc      uint32    CRC-32 of everything before it

The JSON header is written with sorted keys, so saving the same parameters
and config twice gives byte-identical files.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

__all__ = ["FORMAT_VERSION", "CheckpointError", "CorruptCheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"DITJSCC\0"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def save_checkpoint(params: dict[str, torch.Tensor], path, config: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(params):
        arr = params[name].detach().cpu().numpy()
        key = str(arr.dtype)
        if key not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {key} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        entries.append({"name": name, "dtype": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config or {}, "tensors": entries}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Returns ``(params, config)``."""
    data = Path(path).read_bytes()
    fixed = len(MAGIC) + 12
    if len(data) < fixed + 4 or data[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file or truncated header")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC) : fixed])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or damaged file)")
    header = json.loads(body[fixed : fixed + hlen])
    payload = body[fixed + hlen :]
    params = {}
    for e in header["tensors"]:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CorruptCheckpointError(f"{path}: tensor {e['name']} is truncated")
        arr = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        params[e["name"]] = torch.from_numpy(arr.astype(e["dtype"]))
    return params, header["config"]
