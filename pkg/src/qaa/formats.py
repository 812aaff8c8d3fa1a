"""Binary descriptor files (``CQSA``) and parameter checkpoints (``CQSP``).

Descriptor file, little-endian::

    b"CQSA" | version u32 | C_d u32 | count u64 | count * C_d float32

with record ids in a sidecar text file ``<path>.ids``, one per line.

Checkpoint, little-endian::

    b"CQSP" | version u32 | header length u32 | header JSON | float64 arrays

The JSON header echoes the model config and lists array names and shapes in
storage order, plus any caller metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .aggregator import QaaConfig, QaaParams
from .errors import FormatError

DESCRIPTOR_MAGIC = b"CQSA"
DESCRIPTOR_VERSION = 1
CHECKPOINT_MAGIC = b"CQSP"
CHECKPOINT_VERSION = 1

_DESC_HEADER = struct.Struct("<4sIIQ")
_CKPT_HEADER = struct.Struct("<4sII")


def ids_path(path) -> Path:
    return Path(f"{path}.ids")


def write_descriptors(path, descriptors, ids) -> None:
    d = np.asarray(descriptors, dtype="<f4")
    if d.ndim != 2:
        raise FormatError(f"descriptors must be a 2-D array, got shape {d.shape}")
    ids = [str(i) for i in ids]
    if len(ids) != len(d):
        raise FormatError(f"{len(ids)} ids for {len(d)} descriptors")
    for i in ids:
        if "\n" in i or "\r" in i:
            raise FormatError(f"record id {i!r} contains a line break")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_DESC_HEADER.pack(DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION, d.shape[1], d.shape[0]))
        f.write(d.tobytes())
    ids_path(path).write_text("".join(i + "\n" for i in ids))


def read_descriptors(path):
    """Returns ``(float32 array (count, C_d), ids)``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _DESC_HEADER.size:
        raise FormatError(f"{path}: truncated descriptor header")
    magic, version, c_d, count = _DESC_HEADER.unpack_from(raw)
    if magic != DESCRIPTOR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {DESCRIPTOR_MAGIC!r}")
    if version != DESCRIPTOR_VERSION:
        raise FormatError(f"{path}: descriptor format version {version}, supported {DESCRIPTOR_VERSION}")
    body = raw[_DESC_HEADER.size:]
    if len(body) != count * c_d * 4:
        raise FormatError(f"{path}: expected {count}x{c_d} float32 values, found {len(body)} bytes")
    data = np.frombuffer(body, dtype="<f4").reshape(count, c_d).copy()
    side = ids_path(path)
    if not side.exists():
        raise FormatError(f"{path}: id sidecar {side} is missing")
    ids = side.read_text().splitlines()
    if len(ids) != count:
        raise FormatError(f"{side}: {len(ids)} ids for {count} descriptors")
    return data, ids


def write_checkpoint(path, params: QaaParams, metadata: dict | None = None) -> None:
    arrays = params.named_arrays()
    names = sorted(arrays)
    header = {
        "config": params.config.to_dict(),
        "arrays": [[n, list(arrays[n].shape)] for n in names],
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def read_checkpoint(path):
    """Returns ``(QaaParams, metadata)``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, n = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, supported {CHECKPOINT_VERSION}")
    try:
        header = json.loads(raw[_CKPT_HEADER.size:_CKPT_HEADER.size + n].decode("utf-8"))
        config = QaaConfig.from_dict(header["config"])
        layout = header["arrays"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint header ({exc})") from None
    offset = _CKPT_HEADER.size + n
    arrays = {}
    for name, shape in layout:
        size = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * size
        if end > len(raw):
            raise FormatError(f"{path}: truncated at array {name!r}")
        arrays[name] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    try:
        params = QaaParams.from_arrays(config, arrays)
    except KeyError as exc:
        raise FormatError(f"{path}: missing array {exc}") from None
    return params, header.get("metadata", {})
