"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"PRCV" | uint32 version | uint64 manifest length | manifest (UTF-8 JSON) | payloads

The manifest is a list of ``{"name", "dtype", "shape", "offset", "nbytes"}``
entries; offsets are relative to the start of the payload section. Payloads
are raw little-endian arrays in C order. ``float64`` round-trips bit-exactly;
``float32`` is an optional compact storage mode.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"PRCV"
VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4"}


class CheckpointError(ValueError):
    pass


def save(path: str | Path, tensors: Mapping[str, np.ndarray], dtype: str = "float64") -> None:
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported checkpoint dtype {dtype!r}")
    manifest, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        manifest.append(
            {"name": name, "dtype": dtype, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_manifest(path: str | Path) -> list[dict]:
    with open(path, "rb") as fh:
        return _read_header(fh)[0]


def _read_header(fh) -> tuple[list[dict], int]:
    if fh.read(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, length = struct.unpack("<IQ", fh.read(12))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(fh.read(length).decode("utf-8"))
    return manifest, 16 + length


def load(path: str | Path) -> dict[str, np.ndarray]:
    """Read every tensor, converted to float64."""
    with open(path, "rb") as fh:
        manifest, start = _read_header(fh)
        payload = fh.read()
    out = {}
    for entry in manifest:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        out[entry["name"]] = arr.astype(np.float64)
    return out


def save_parameters(path: str | Path, params: Iterable, dtype: str = "float64") -> None:
    save(path, {p.name: p.data for p in params}, dtype=dtype)


def load_parameters(path: str | Path, params: Iterable) -> None:
    """Assign stored values to ``params`` by name; every parameter must be present."""
    stored = load(path)
    for p in params:
        if p.name not in stored:
            raise CheckpointError(f"checkpoint has no tensor named {p.name!r}")
        p.assign(stored[p.name])
