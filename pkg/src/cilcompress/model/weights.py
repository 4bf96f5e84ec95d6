"""Binary weights container.

Layout (all integers little-endian)::

    8 bytes   magic  b"CILWTS01"
    8 bytes   u64    header length H
    H bytes   UTF-8 JSON header: {"graph": <ModelGraph spec>, "meta": {...},
              "tensors": [{"name", "shape", "dtype", "offset", "count"}, ...]}
    ...       raw float32 little-endian tensor data, concatenated in table order
    32 bytes  SHA-256 over every preceding byte

``offset`` is in bytes from the start of the data block.  Integer buffers
(BN ``num_batches_tracked``) are stored as float32 and restored to their
original dtype.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .graph import HEAD, ModelGraph, _key

MAGIC = b"CILWTS01"


class WeightsFormatError(ValueError):
    pass


class IncompatibleWeightsError(ValueError):
    pass


def save_weights(model: ModelGraph, path: str | Path, meta: dict | None = None) -> None:
    state = model.state_dict()
    table, blobs, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        table.append({
            "name": name,
            "shape": list(tensor.shape),
            "dtype": str(tensor.dtype).replace("torch.", ""),
            "offset": offset,
            "count": int(arr.size),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"graph": model.spec(), "meta": meta or {}, "tensors": table}, sort_keys=True
    ).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_weights(path: str | Path) -> tuple[dict, dict[str, torch.Tensor], dict]:
    """Return ``(graph_spec, state_dict, meta)`` after verifying the checksum."""
    blob = Path(path).read_bytes()
    if len(blob) < 48 or blob[:8] != MAGIC:
        raise WeightsFormatError(f"{path}: not a weights container")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise WeightsFormatError(f"{path}: checksum mismatch")
    (hlen,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16 : 16 + hlen].decode("utf-8"))
    data = body[16 + hlen :]
    state = {}
    for rec in header["tensors"]:
        start = rec["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=rec["count"], offset=start).reshape(rec["shape"])
        dtype = getattr(torch, rec["dtype"])
        state[rec["name"]] = torch.from_numpy(arr.copy()).to(dtype)
    return header["graph"], state, header.get("meta", {})


def load_model(path: str | Path) -> ModelGraph:
    spec, state, _ = read_weights(path)
    model = ModelGraph.from_spec(spec)
    model.load_state_dict(state)
    return model


def load_pretrained(model: ModelGraph, path: str | Path) -> ModelGraph:
    """Copy backbone tensors from ``path`` into ``model``; the head is untouched."""
    _, state, _ = read_weights(path)
    head_prefix = f"layers.{_key(HEAD)}."
    own = model.state_dict()
    for name, tensor in own.items():
        if name.startswith(head_prefix):
            continue
        if name not in state:
            raise IncompatibleWeightsError(f"layer {name!r} missing from {path}")
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise IncompatibleWeightsError(
                f"layer {name!r}: file shape {tuple(state[name].shape)} != model shape {tuple(tensor.shape)}"
            )
    with torch.no_grad():
        for name, tensor in own.items():
            if not name.startswith(head_prefix):
                tensor.copy_(state[name])
    return model
