"""Versioned binary container for named float tensors.

Used for model checkpoints written by `train` and read by later subcommands.
Entries are sorted by name and written little-endian, so identical tensor
dicts serialize to identical bytes (archive formats with embedded timestamps
would break byte-level reproducibility).
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import MalformedRow, MissingFile

_MAGIC = b"SPFT"
_VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    entries = sorted(tensors.items())
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(entries)))
        for name, arr in entries:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_tensors(path) -> dict:
    try:
        fh = open(path, "rb")
    except FileNotFoundError as exc:
        raise MissingFile(str(path)) from exc
    with fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise MalformedRow(f"{path}: bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise MalformedRow(f"{path}: unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n_bytes = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
            payload = fh.read(n_bytes)
            if len(payload) != n_bytes:
                raise MalformedRow(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        return tensors
