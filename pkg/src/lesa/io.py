"""Binary file formats: ``LTEN`` tensor files and ``LESA`` checkpoints.

Tensor file (little-endian)::

    b"LTEN" | u16 version | u8 dtype code | u8 rank | u64 dims[rank] | payload (row-major)

Checkpoint file (little-endian)::

    b"LESA" | u32 version | u64 header length | header (UTF-8 JSON) | payload | u64 checksum

The JSON header carries the architecture text and a tensor table
``name -> {dtype, shape, offset, nbytes}`` with offsets relative to the start
of the payload, so any tensor can be sliced out without the model code.
The checksum is an 8-byte BLAKE2b digest of the payload.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = [
    "FormatError",
    "ChecksumError",
    "write_tensor",
    "read_tensor",
    "write_labels",
    "read_labels",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_index",
    "read_checkpoint_tensor",
    "atomic_write",
]

TENSOR_MAGIC = b"LTEN"
TENSOR_VERSION = 1
CKPT_MAGIC = b"LESA"
CKPT_VERSION = 1

_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    """File does not follow the expected layout (bad magic, version, size)."""


class ChecksumError(FormatError):
    """Stored checksum does not match the payload."""


def atomic_write(path: str, data: bytes) -> None:
    """Write ``data`` to a temporary file next to ``path`` and rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- tensor files ----------------------------------------------------------------------


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    dtype = np.dtype("<i8") if np.issubdtype(arr.dtype, np.integer) else np.dtype("<f8")
    arr = np.asarray(arr, dtype=dtype, order="C")
    header = struct.pack("<4sHBB", TENSOR_MAGIC, TENSOR_VERSION, _DTYPE_CODES[dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8:
        raise FormatError(f"{source}: too short for a tensor header")
    magic, version, code, rank = struct.unpack_from("<4sHBB", buf, 0)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"{source}: unsupported tensor version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    off = 8 + 8 * rank
    if len(buf) < off:
        raise FormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != expected:
        raise FormatError(f"{source}: payload has {len(buf) - off} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype=dtype, offset=off).reshape(dims).copy()


def write_tensor(path: str, array: np.ndarray) -> None:
    try:
        atomic_write(path, encode_tensor(array))
    except OSError as exc:
        raise OSError(f"cannot write tensor file {path}: {exc}") from exc


def read_tensor(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read tensor file {path}: {exc}") from exc
    return decode_tensor(buf, path)


def write_labels(path: str, labels: np.ndarray) -> None:
    lines = ["index,class"] + [f"{i},{int(c)}" for i, c in enumerate(labels)]
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_labels(path: str) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    idx = np.array([int(r["index"]) for r in rows], dtype=np.int64)
    if not np.array_equal(idx, np.arange(len(rows))):
        raise FormatError(f"{path}: label indices must be 0..n-1 in order")
    return np.array([int(r["class"]) for r in rows], dtype=np.int64)


# -- checkpoints ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    architecture: str
    tensors: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr, dtype="<f8", order="C")
        raw = a.tobytes()
        table.append({"name": name, "dtype": "<f8", "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    if len({t["name"] for t in table}) != len(table):
        raise ValueError("checkpoint tensor names must be unique")
    header = json.dumps(
        {"format_version": CKPT_VERSION, "architecture": ckpt.architecture, "tensors": table, "meta": ckpt.meta},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    payload = b"".join(chunks)
    return (
        CKPT_MAGIC
        + struct.pack("<IQ", CKPT_VERSION, len(header))
        + header
        + payload
        + _checksum(payload)
    )


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    try:
        atomic_write(path, encode_checkpoint(ckpt))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def _parse_header(buf: bytes, source: str) -> tuple[dict, int]:
    if len(buf) < 16:
        raise FormatError(f"{source}: file too short to be a checkpoint")
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    start = 16 + hlen
    if len(buf) < start:
        raise ChecksumError(f"{source}: truncated header")
    try:
        header = json.loads(buf[16:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable header: {exc}") from exc
    return header, start


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    header, start = _parse_header(buf, source)
    size = sum(t["nbytes"] for t in header["tensors"])
    if len(buf) != start + size + 8:
        raise ChecksumError(f"{source}: expected {start + size + 8} bytes, found {len(buf)} (truncated or padded)")
    payload = buf[start : start + size]
    if _checksum(payload) != buf[start + size :]:
        raise ChecksumError(f"{source}: payload checksum mismatch; refusing to load")
    tensors = {}
    for t in header["tensors"]:
        arr = np.frombuffer(payload, dtype=t["dtype"], count=t["nbytes"] // 8, offset=t["offset"])
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    return Checkpoint(header["architecture"], tensors, header.get("meta", {}))


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf, path)


def _read_index(path: str) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise FormatError(f"{path}: file too short to be a checkpoint")
        _, hlen = struct.unpack_from("<IQ", head, 4)
        return _parse_header(head + fh.read(hlen), path)


def read_checkpoint_index(path: str) -> dict:
    """Header only: architecture text, tensor table and metadata."""
    return _read_index(path)[0]


def read_checkpoint_tensor(path: str, name: str) -> np.ndarray:
    """Slice one tensor out of a checkpoint using only the header table."""
    header, start = _read_index(path)
    for t in header["tensors"]:
        if t["name"] == name:
            with open(path, "rb") as fh:
                fh.seek(start + t["offset"])
                raw = fh.read(t["nbytes"])
            return np.frombuffer(raw, dtype=t["dtype"]).reshape(t["shape"]).copy()
    raise KeyError(f"{path}: no tensor named {name!r}")
