"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic    8 bytes  b"CTRLDIAL"
    version  uint32
    hlen     uint32   length of the header block
    header   hlen bytes of UTF-8 JSON: {"kind", "config", "params": [[name, shape], ...]}
    payload  float64 little-endian values of every parameter, in header order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CTRLDIAL"
VERSION = 1


def save_arrays(path, kind: str, config: dict, arrays: dict[str, np.ndarray]) -> None:
    header = {
        "kind": kind,
        "config": config,
        "params": [[name, list(arr.shape)] for name, arr in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_arrays(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(raw):
        raise ValueError(f"{path}: payload size does not match header")
    return header["kind"], header["config"], arrays
