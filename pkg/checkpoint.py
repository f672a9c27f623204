"""RVT1 checkpoint files.

Layout: the magic `RVT1`, an unsigned 32-bit little-endian length, that
many bytes of UTF-8 JSON metadata, then the tensor blobs (little-endian
float32, concatenated in metadata order). Each metadata tensor entry holds
name, shape, byte offset (relative to the first blob) and byte length.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from model import ModelConfig, ModelParams, expected_shapes, params_from_arrays
from shared import CheckpointFormatError, ReViTError, get_logger

logger = get_logger(__name__)

MAGIC = b"RVT1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<I")
_BLOB_DTYPE = np.dtype("<f4")

OPTIM_PREFIXES = ("optim.m.", "optim.v.")

PathLike = Union[str, os.PathLike]


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    optimizer_meta: Optional[Dict[str, Any]] = None
    optimizer_arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.named_parameters().items()}


def _entries(tensors: Dict[str, np.ndarray]) -> List[Dict[str, Any]]:
    entries, offset = [], 0
    for name, arr in tensors.items():
        nbytes = int(arr.size) * _BLOB_DTYPE.itemsize
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return entries


def save_checkpoint(
    path: PathLike,
    config: ModelConfig,
    params: ModelParams,
    optimizer: Any = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write a checkpoint atomically (temp file + rename).

    `optimizer` is anything exposing `hyperparameters()` and `state_arrays()`.
    """
    tensors: Dict[str, np.ndarray] = {n: t.data for n, t in params.named_parameters().items()}
    optimizer_meta = None
    if optimizer is not None:
        optimizer_meta = optimizer.hyperparameters()
        tensors.update(optimizer.state_arrays())

    meta = {
        "format": FORMAT_VERSION,
        "config": config.to_dict(),
        "tensors": _entries(tensors),
        "optimizer": optimizer_meta,
        "extra": extra or {},
    }
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(MAGIC)
        handle.write(_LEN.pack(len(header)))
        handle.write(header)
        for arr in tensors.values():
            handle.write(np.ascontiguousarray(arr, dtype=_BLOB_DTYPE).tobytes())
    os.replace(tmp, path)
    logger.debug("wrote checkpoint %s (%d tensors)", path, len(tensors))
    return path


def read_header(raw: bytes) -> Dict[str, Any]:
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:4]!r}; expected {MAGIC!r}")
    if len(raw) < 8:
        raise CheckpointFormatError("truncated header")
    (length,) = _LEN.unpack_from(raw, 4)
    if len(raw) < 8 + length:
        raise CheckpointFormatError("truncated metadata document")
    try:
        meta = json.loads(raw[8 : 8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable metadata: {exc}") from exc
    meta["_blob_start"] = 8 + length
    return meta


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    meta = read_header(raw)
    if meta.get("format") != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {meta.get('format')!r}")
    try:
        config = ModelConfig.from_dict(meta["config"])
    except (KeyError, TypeError, ReViTError) as exc:
        raise CheckpointFormatError(f"{path}: invalid config: {exc}") from exc

    blobs = memoryview(raw)[meta["_blob_start"] :]
    known = set(expected_shapes(config))
    model_arrays: Dict[str, np.ndarray] = {}
    optimizer_arrays: Dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in meta.get("tensors", []):
        name, shape = entry["name"], tuple(entry["shape"])
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        count = int(np.prod(shape)) if shape else 1
        if offset != expected_offset or nbytes != count * _BLOB_DTYPE.itemsize:
            raise CheckpointFormatError(f"{path}: tensor {name} has inconsistent offset/length")
        if offset + nbytes > len(blobs):
            raise CheckpointFormatError(f"{path}: truncated blob for tensor {name}")
        expected_offset = offset + nbytes
        arr = np.frombuffer(blobs[offset : offset + nbytes], dtype=_BLOB_DTYPE).astype(np.float32).reshape(shape)

        if name in known:
            model_arrays[name] = arr
        elif name.startswith(OPTIM_PREFIXES) and name.split(".", 2)[2] in known:
            optimizer_arrays[name] = arr
        else:
            raise CheckpointFormatError(f"{path}: unknown tensor name {name!r}")
    if expected_offset != len(blobs):
        raise CheckpointFormatError(f"{path}: {len(blobs) - expected_offset} trailing bytes after last tensor")

    try:
        params = params_from_arrays(config, model_arrays)
    except ReViTError as exc:
        raise CheckpointFormatError(f"{path}: {exc}") from exc
    return Checkpoint(config, params, meta.get("optimizer"), optimizer_arrays, meta.get("extra") or {})
