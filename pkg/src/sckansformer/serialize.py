"""Flat binary tensor container and directory checkpoints.

Container layout, all little-endian:

    magic "SCKT" | version u32 | dtype tag u32 | rank u32 | dims u64[rank] | raw values

Dtype tags: 0 = float64, 1 = float32. A checkpoint is a directory holding
``tensors.bin`` (containers back to back), ``manifest.tsv`` (name, byte
offset, dtype, shape per line) and ``config.json``. Nothing in the format
carries timestamps, so identical state always serializes to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import ContractError

MAGIC = b"SCKT"
VERSION = 1

_TAG_TO_DTYPE = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_TO_TAG = {np.float64: 0, np.float32: 1}

MANIFEST_NAME = "manifest.tsv"
TENSORS_NAME = "tensors.bin"
CONFIG_NAME = "config.json"


def dump_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    tag = _DTYPE_TO_TAG.get(arr.dtype.type)
    if tag is None:
        raise ContractError(f"unsupported dtype {arr.dtype}; float32/float64 only")
    header = MAGIC + struct.pack("<III", VERSION, tag, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    body = np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[tag]).tobytes()
    return header + dims + body


def load_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one container; returns (array, offset past it)."""
    if buf[offset : offset + 4] != MAGIC:
        raise ContractError(f"bad container magic at offset {offset}")
    version, tag, rank = struct.unpack_from("<III", buf, offset + 4)
    if version != VERSION:
        raise ContractError(f"unsupported container version {version}")
    if tag not in _TAG_TO_DTYPE:
        raise ContractError(f"unknown dtype tag {tag}")
    pos = offset + 16
    dims = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
    pos += 8 * rank
    dtype = _TAG_TO_DTYPE[tag]
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise ContractError("container truncated")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
    # native byte order + writable copy
    return arr.astype(arr.dtype.newbyteorder("="), copy=True), pos + nbytes


def save_checkpoint(path, tensors: dict, config: dict | None = None) -> None:
    """Write a checkpoint directory. Tensor order is sorted by name."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    lines = []
    for name in sorted(tensors):
        if "\t" in name or "\n" in name:
            raise ContractError(f"tensor name {name!r} contains separator characters")
        arr = np.asarray(tensors[name])
        shape_txt = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name}\t{len(blob)}\t{arr.dtype.name}\t{shape_txt}")
        blob += dump_tensor(arr)
    (path / TENSORS_NAME).write_bytes(bytes(blob))
    (path / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    if config is not None:
        (path / CONFIG_NAME).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict, dict | None]:
    path = Path(path)
    manifest = path / MANIFEST_NAME
    if not manifest.exists():
        raise ContractError(f"{path} is not a checkpoint directory (no {MANIFEST_NAME})")
    blob = (path / TENSORS_NAME).read_bytes()
    tensors = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            name, offset, dtype_name, shape_txt = line.split("\t")
        except ValueError:
            raise ContractError(f"{MANIFEST_NAME}:{lineno}: malformed line")
        arr, _ = load_tensor(blob, int(offset))
        expected = tuple(int(d) for d in shape_txt.split(",")) if shape_txt else ()
        if arr.shape != expected or arr.dtype.name != dtype_name:
            raise ContractError(
                f"{MANIFEST_NAME}:{lineno}: container disagrees with manifest for {name!r}"
            )
        tensors[name] = arr
    config = None
    cfg_path = path / CONFIG_NAME
    if cfg_path.exists():
        config = json.loads(cfg_path.read_text())
    return tensors, config
