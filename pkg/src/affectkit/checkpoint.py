"""Single-file checkpoint container: JSON header plus raw little-endian tensors.

Layout: 4-byte magic, uint32 little-endian header length, UTF-8 JSON header,
then each tensor's bytes back to back in manifest order (row-major,
little-endian). The header records kind, config, step and a tensor manifest
with explicit offsets, so files are self-describing and byte-stable for
identical inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Union

import numpy as np
import torch

MAGIC = b"AFCK"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "|u1",
    "bool": "|b1",
}


@dataclass
class Checkpoint:
    kind: str
    config: dict
    step: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype.name not in _DTYPES:
        raise ValueError(f"unsupported tensor dtype {arr.dtype.name}")
    return arr


def save_checkpoint(path: Union[str, Path], kind: str, config: Mapping,
                    tensors: Mapping[str, "np.ndarray | torch.Tensor"],
                    step: int = 0) -> None:
    """Write a checkpoint; identical inputs produce identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: _to_numpy(v) for name, v in tensors.items()}
    manifest = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        nbytes = arr.size * np.dtype(_DTYPES[arr.dtype.name]).itemsize
        manifest.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": nbytes,
        })
        offset += nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "step": int(step),
        "config": dict(config),
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for entry in manifest:
            arr = arrays[entry["name"]]
            fh.write(np.ascontiguousarray(arr).astype(
                _DTYPES[entry["dtype"]], copy=False).tobytes(order="C"))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint back; raises ValueError on malformed files."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version!r}")
    payload = raw[8 + header_len:]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise ValueError(f"{path}: unsupported dtype {dtype!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise ValueError(f"{path}: truncated payload for {entry['name']!r}")
        arr = np.frombuffer(payload[start:start + nbytes],
                            dtype=_DTYPES[dtype]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(dtype, copy=True)
    return Checkpoint(kind=header["kind"], config=header["config"],
                      step=int(header["step"]), tensors=tensors)


def state_dict_tensors(module: torch.nn.Module) -> dict[str, np.ndarray]:
    """Module state_dict as numpy arrays ready for save_checkpoint."""
    return {k: _to_numpy(v) for k, v in module.state_dict().items()}


def load_state_dict(module: torch.nn.Module,
                    tensors: Mapping[str, np.ndarray]) -> None:
    """Restore a module from checkpoint tensors (strict name match)."""
    state = {k: torch.from_numpy(np.ascontiguousarray(v))
             for k, v in tensors.items()}
    module.load_state_dict(state, strict=True)
