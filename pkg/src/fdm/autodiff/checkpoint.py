"""Self-describing checkpoint container.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"FDMCKPT1"
    offset 8   8 bytes   uint64 header length H
    offset 16  H bytes   UTF-8 JSON header
    ...        pad       zero bytes up to the next multiple of 8
    data       raw tensor buffers, each starting on an 8-byte boundary

The JSON header has keys ``format`` (=1), ``tensors`` (list of
``{name, shape, dtype, offset, nbytes}`` with ``offset`` relative to the start
of the data region and ``dtype`` a numpy little-endian code such as ``<f8`` or
``<c16``), ``partition`` (parameter name -> ``"wave"`` | ``"cache"``) and a
free-form ``meta`` object.  Keys are sorted so identical inputs give identical
bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FDMCKPT1"
_ALIGN = 8


class CheckpointError(ValueError):
    pass


def _pad(n: int) -> int:
    return (-n) % _ALIGN


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], partition: Mapping[str, str] | None = None,
                    meta: Mapping | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], order="C")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw + b"\0" * _pad(len(raw)))
        offset += len(raw) + _pad(len(raw))
    header = json.dumps({"format": 1, "tensors": entries, "partition": dict(partition or {}),
                         "meta": dict(meta or {})}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(b"\0" * _pad(16 + len(header)))
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an FDM checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode())
    if header.get("format") != 1:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')}")
    base = 16 + hlen + _pad(16 + hlen)
    out = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated buffer for {e['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        out[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return out, header["partition"], header["meta"]
