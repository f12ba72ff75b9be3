"""Checkpoint files: a JSON header followed by raw little-endian tensors.

Layout::

    SPIKEKIT-CKPT 1\n
    <header byte length>\n
    <header JSON>
    <payload>

The header lists each tensor's name, dtype, shape and payload offset, plus
the model config and free-form metadata. Tensors are written verbatim, so
a reload is bit-exact.
"""
from __future__ import annotations

import json
from collections import OrderedDict

import numpy as np

from ..errors import LoadError

MAGIC = b"SPIKEKIT-CKPT 1\n"


def save_checkpoint(path, state: dict, config: dict | None = None, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in state.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config or {}, "meta": meta or {}, "tensors": entries}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(f"{len(header)}\n".encode())
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    """Returns ``(state, header)`` where header has ``config`` and ``meta``."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise LoadError(f"cannot read checkpoint {path}: {e}") from e
    if not data.startswith(MAGIC):
        raise LoadError(f"{path} is not a spikekit checkpoint")
    rest = data[len(MAGIC):]
    nl = rest.find(b"\n")
    try:
        hlen = int(rest[:nl])
        header = json.loads(rest[nl + 1:nl + 1 + hlen])
    except (ValueError, json.JSONDecodeError) as e:
        raise LoadError(f"{path}: corrupt header") from e
    payload = memoryview(rest)[nl + 1 + hlen:]
    state = OrderedDict()
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise LoadError(f"{path}: tensor {e['name']} runs past end of file")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=np.dtype(e["dtype"]))
        state[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return state, header
