"""Named-tensor checkpoint archive.

Layout: magic ``b"CRCK"``, u8 version, u32 little-endian header length, a
UTF-8 JSON header, then one CRTF blob per tensor in header order.  Tensor
names are stored as ``<module>.<role>.<layer>.<param>@<frozen|train>``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from . import tensorio

MAGIC = b"CRCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    frozen: set[str] = field(default_factory=set)
    config: dict[str, Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)
    rng_state: dict[str, Any] | None = None

    def without_prefix_role(self, role: str) -> "Checkpoint":
        """Copy with every tensor whose role segment equals ``role`` dropped."""
        keep = {k: v for k, v in self.tensors.items() if k.split(".")[1:2] != [role]}
        return Checkpoint(keep, self.frozen & set(keep), dict(self.config), dict(self.meta), self.rng_state)


def _encode_name(name: str, frozen: bool) -> str:
    if "@" in name:
        raise CheckpointError(f"tensor name {name!r} may not contain '@'")
    return f"{name}@{'frozen' if frozen else 'train'}"


def _decode_name(stored: str) -> tuple[str, bool]:
    name, _, flag = stored.rpartition("@")
    if flag not in ("frozen", "train") or not name:
        raise CheckpointError(f"malformed tensor name {stored!r}")
    return name, flag == "frozen"


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    names = list(ckpt.tensors)
    blobs = [tensorio.dumps(np.asarray(ckpt.tensors[n], dtype=np.float64)) for n in names]
    header = {
        "config": ckpt.config,
        "meta": ckpt.meta,
        "rng_state": ckpt.rng_state,
        "tensors": [
            {"name": _encode_name(n, n in ckpt.frozen), "shape": list(np.shape(ckpt.tensors[n])), "nbytes": len(b)}
            for n, b in zip(names, blobs)
        ],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BI", VERSION, len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    if len(data) < 9:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<BI", data[4:9])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[9 : 9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    pos = 9 + hlen
    tensors: dict[str, np.ndarray] = {}
    frozen: set[str] = set()
    for entry in header["tensors"]:
        name, is_frozen = _decode_name(entry["name"])
        blob = data[pos : pos + entry["nbytes"]]
        pos += entry["nbytes"]
        try:
            arr = tensorio.loads(blob)
        except tensorio.FormatError as exc:
            raise CheckpointError(f"{path}: tensor {name!r}: {exc}") from exc
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {arr.shape}, header says {entry['shape']}")
        tensors[name] = arr
        if is_frozen:
            frozen.add(name)
    return Checkpoint(tensors, frozen, header["config"], header["meta"], header["rng_state"])


def check_compatible(tensors: Mapping[str, np.ndarray], expected: Mapping[str, tuple[int, ...]]) -> None:
    """Raise naming the first tensor that is missing or mis-shaped."""
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(f"tensor {name!r}: shape {tensors[name].shape} != expected {tuple(shape)}")
