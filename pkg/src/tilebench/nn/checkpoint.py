"""Flat binary model checkpoints.

Layout::

    8 bytes   magic b"TBCKPT01"
    4 bytes   header length n, uint32 little-endian
    n bytes   UTF-8 JSON: {"spec": {...}, "tensors": [{"name", "dtype", "shape"}, ...], "meta": {...}}
    ...       each tensor's values, little-endian, C order, in header order

Tensor order is the model's ``state_dict`` order (parameters and persistent
buffers in declaration order).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from ..core import atomic_write_bytes
from ..errors import ParseError
from .models import ArchitectureSpec, build_model

MAGIC = b"TBCKPT01"
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


def encode_checkpoint(model: torch.nn.Module, spec: ArchitectureSpec, meta: dict | None = None) -> bytes:
    entries, blobs = [], []
    for name, t in model.state_dict().items():
        if t.dtype not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {t.dtype}")
        code = _DTYPES[t.dtype]
        entries.append({"name": name, "dtype": code, "shape": list(t.shape)})
        blobs.append(np.ascontiguousarray(t.detach().cpu().numpy(), dtype=code).tobytes())
    header = json.dumps({"spec": spec.to_dict(), "tensors": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)


def decode_checkpoint(data: bytes) -> tuple[ArchitectureSpec, dict[str, torch.Tensor], dict]:
    if data[:8] != MAGIC:
        raise ParseError("not a checkpoint (bad magic)")
    if len(data) < 12:
        raise ParseError("truncated checkpoint header")
    (n,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad checkpoint header: {exc}") from None
    offset = 12 + n
    state = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = offset + count * dt.itemsize
        if end > len(data):
            raise ParseError(f"truncated checkpoint at tensor {e['name']}")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
        offset = end
    if offset != len(data):
        raise ParseError("trailing bytes after last tensor")
    return ArchitectureSpec.from_dict(header["spec"]), state, header.get("meta", {})


def save_checkpoint(path: str | os.PathLike, model: torch.nn.Module, spec: ArchitectureSpec,
                    meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(model, spec, meta))


def load_checkpoint(path: str | os.PathLike) -> tuple[torch.nn.Module, ArchitectureSpec, dict]:
    spec, state, meta = decode_checkpoint(Path(path).read_bytes())
    model = build_model(spec, seed=None)
    model.load_state_dict(state)
    model.eval()
    return model, spec, meta
