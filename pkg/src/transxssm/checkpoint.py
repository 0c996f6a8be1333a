"""Flat binary checkpoint: JSON header + raw little-endian float64 payload.

Layout: 8-byte magic, uint64-LE header length, UTF-8 JSON header, then the
tensor payloads concatenated in manifest order. The header records the run
config and, per tensor, its name, shape, byte offset and length. Values are
always stored as little-endian float64, so a save/load round trip is
bit-exact regardless of the active precision mode.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .tensor import Tensor

__all__ = ["save_checkpoint", "load_checkpoint"]

MAGIC = b"TXSMCKP1"


def save_checkpoint(path: str, named_tensors: dict[str, "Tensor | np.ndarray"], config: dict) -> None:
    manifest = []
    payloads = []
    offset = 0
    for name in sorted(named_tensors):
        t = named_tensors[name]
        arr = (t.data if isinstance(t, Tensor) else np.asarray(t)).astype("<f8")
        raw = arr.tobytes(order="C")
        manifest.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "dtype": "<f8", "tensors": manifest}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    tensors = {}
    for entry in header["tensors"]:
        lo, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[lo : lo + n], dtype="<f8").reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return tensors, header["config"]
