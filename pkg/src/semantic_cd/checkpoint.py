"""Flat tensor checkpoint files.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the raw tensor payload. The header lists every tensor (name, dtype,
shape, offset) and the SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptFile, VersionMismatch

MAGIC = b"SCDCKPT\x01"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.float16: "float16",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}


def write_checkpoint(path, tensors: dict[str, torch.Tensor], header: dict | None = None) -> Path:
    path = Path(path)
    index = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {t.dtype}")
        raw = t.numpy().tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    head = dict(header or {})
    head.update(
        format_version=FORMAT_VERSION,
        tensors=index,
        payload_bytes=len(payload),
        payload_sha256=hashlib.sha256(payload).hexdigest(),
    )
    blob = json.dumps(head, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def read_header(path) -> dict:
    return _read(path, payload=False)[1]


def read_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    return _read(path, payload=True)


def _read(path, payload: bool):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {header.get('format_version')}, expected {FORMAT_VERSION}")
    body = data[16 + hlen :]
    if len(body) != header["payload_bytes"] or hashlib.sha256(body).hexdigest() != header["payload_sha256"]:
        raise CorruptFile(f"{path}: payload checksum mismatch")
    if not payload:
        return {}, header
    tensors = {}
    for entry in header["tensors"]:
        raw = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)
    return tensors, header
