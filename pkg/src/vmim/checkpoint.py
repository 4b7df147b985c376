"""Versioned named-tensor checkpoint files (magic "VMIM1").

Layout: 6-byte magic, 8-byte little-endian header length, UTF-8 JSON
header (config echo plus a tensor index), then the concatenated raw
little-endian float64 payloads. Serialization is canonical (sorted keys),
so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Tensor

MAGIC = b"VMIM1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, params: dict[str, Tensor], config: dict) -> None:
    names = sorted(params)
    index = []
    offset = 0
    for name in names:
        shape = list(params[name].shape)
        size = int(params[name].size)
        index.append({"name": name, "shape": shape, "offset": offset})
        offset += size * 8
    header = json.dumps(
        {"version": 1, "config": config, "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in names:
            fh.write(params[name].data.astype("<f8").tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    params: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        raw = np.frombuffer(payload, dtype="<f8", count=size, offset=start)
        if raw.size != size:
            raise CheckpointError(f"{path}: truncated payload for tensor {entry['name']}")
        params[entry["name"]] = Tensor(raw.reshape(shape).copy(), requires_grad=True)
    return params, header["config"]
