"""Deterministic checkpoint archive.

A checkpoint is a single file: a magic line, an 8-byte little-endian
header length, a JSON header (sorted keys) describing every tensor by
hierarchical name (dtype, shape, byte offset) plus free-form metadata
(config text, seeds), then the concatenated little-endian tensor payloads.
Identical contents always produce identical bytes, so artifact hashes are
reproducible run to run.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "module_tensors",
    "load_module_tensors",
    "checkpoint_sha256",
]

_MAGIC = b"TRISTYLE-CKPT-1\n"


def save_checkpoint(path: str | Path, tensors: dict, meta: dict | None = None) -> None:
    entries = {}
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries[name] = {
            "dtype": arr.dtype.str.lstrip("<>=|"),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(data),
        }
        payloads.append(data)
        offset += len(data)
    header = json.dumps(
        {"meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for data in payloads:
            fh.write(data)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint archive")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        blob = fh.read()
    tensors = {}
    for name, ent in header["tensors"].items():
        dt = np.dtype(ent["dtype"]).newbyteorder("<")
        arr = np.frombuffer(
            blob, dtype=dt, count=int(np.prod(ent["shape"], dtype=np.int64)) if ent["shape"] else 1,
            offset=ent["offset"],
        )
        tensors[name] = arr.reshape(ent["shape"]).astype(np.dtype(ent["dtype"]))
    return tensors, header["meta"]


def module_tensors(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten a module's state dict into named numpy arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[f"{prefix}{name}"] = tensor.detach().cpu().numpy()
    return out


def load_module_tensors(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {}
    for name, tensor in module.state_dict().items():
        key = f"{prefix}{name}"
        if key not in tensors:
            raise KeyError(f"checkpoint missing tensor {key}")
        state[name] = torch.from_numpy(np.ascontiguousarray(tensors[key])).to(tensor.dtype)
    module.load_state_dict(state)


def checkpoint_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
