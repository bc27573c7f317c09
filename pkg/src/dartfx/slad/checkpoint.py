# SPDX-FileCopyrightText: 2024-present kulnor <pascal.heus@gmail.com>
#
# SPDX-License-Identifier: MIT
"""Binary checkpoints: a versioned JSON header followed by little-endian float64 blobs.

Layout::

    MAGIC (8 bytes) | version (uint32 LE) | header length (uint64 LE) | header (UTF-8 JSON) | blobs

The header lists every named tensor with its shape and byte offset into the blob area,
plus free-form metadata (encoder config, adapter sites, ...).
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path
import struct
from typing import Mapping

import numpy as np

from .errors import DataError
from .tensor import Tensor

MAGIC = b"DFXSLAD\x00"
FORMAT_VERSION = 1


def _as_array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray | Tensor], metadata: dict | None = None) -> Path:
    """Write ``tensors`` atomically (temporary file then rename) so a crash never leaves a torn checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        blob = np.ascontiguousarray(_as_array(value), dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(_as_array(value))), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": entries, "metadata": metadata or {}}, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)
    logging.debug(f"Saved checkpoint {path} with {len(entries)} tensors")
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path} is not a checkpoint file")
    if len(raw) < len(MAGIC) + 12:
        raise DataError(f"truncated checkpoint {path}")
    cursor = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, cursor)
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}", {"path": str(path)})
    cursor += 4
    (header_len,) = struct.unpack_from("<Q", raw, cursor)
    cursor += 8
    try:
        header = json.loads(raw[cursor:cursor + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header in {path}") from exc
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise DataError(f"checkpoint header in {path} has no tensor table")
    base = cursor + header_len
    tensors = {}
    for entry in header["tensors"]:
        try:
            name, offset, nbytes, shape = entry["name"], int(entry["offset"]), int(entry["nbytes"]), tuple(entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed tensor entry in {path}", {"entry": str(entry)}) from exc
        start = base + offset
        if offset < 0 or nbytes < 0 or start + nbytes > len(raw):
            raise DataError(f"truncated checkpoint {path}", {"tensor": name})
        array = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=start)
        try:
            tensors[name] = array.astype(np.float64).reshape(shape)
        except ValueError as exc:
            raise DataError(f"tensor {name} in {path} does not fit shape {list(shape)}") from exc
    metadata = header.get("metadata", {})
    return tensors, metadata if isinstance(metadata, dict) else {}


def checksum(tensors: Mapping[str, np.ndarray | Tensor]) -> str:
    """SHA-256 over names, shapes and little-endian bytes, in key order."""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        array = np.ascontiguousarray(_as_array(tensors[name]), dtype="<f8")
        digest.update(name.encode("utf-8"))
        digest.update(str(array.shape).encode("utf-8"))
        digest.update(array.tobytes())
    return digest.hexdigest()
