"""``IPCK`` v1: a minimal named-tensor container.

Layout, all integers little-endian::

    b"IPCK" | u32 version (=1) | u64 header_length | header (UTF-8 JSON)
    | zero padding to a 64-byte boundary | data section

The header is ``{"metadata": {...}, "tensors": [entry, ...]}`` where each entry
is ``{"name", "dtype" ("f32" | "f64"), "shape", "offset", "nbytes"}``. Offsets
are relative to the start of the data section and are multiples of 64; tensor
bytes are raw little-endian row-major values. Files end at the last tensor byte.
"""

from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, CorruptHeader, OversizeTensor, TruncatedData, UnsupportedVersion

MAGIC = b"IPCK"
VERSION = 1
ALIGN = 64
PREAMBLE = struct.Struct("<4sIQ")
MAX_TENSOR_BYTES = 2**40
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAME = re.compile(r"^[A-Za-z0-9_\-]+([./][A-Za-z0-9_\-]+)*$")
_ENTRY_KEYS = {"name", "dtype", "shape", "offset", "nbytes"}


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise CorruptHeader("dtype", f"unsupported dtype {arr.dtype}")


@dataclass
class Checkpoint:
    """Ordered name -> array map plus a JSON-serialisable metadata dict.

    Arrays keep their stored precision; :meth:`get` widens to float64.
    """

    metadata: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)

    def __setitem__(self, name: str, value) -> None:
        arr = np.asarray(value)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def get(self, name: str) -> np.ndarray:
        return np.array(self.tensors[name], dtype=np.float64)

    def equals(self, other: "Checkpoint") -> bool:
        if self.metadata != other.metadata or list(self.tensors) != list(other.tensors):
            return False
        for name, a in self.tensors.items():
            b = other.tensors[name]
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        if not isinstance(name, str) or not name.isascii() or not _NAME.match(name):
            raise CorruptHeader("name", f"invalid tensor name {name!r}")
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
        if len(raw) > MAX_TENSOR_BYTES:
            raise OversizeTensor(name, f"{len(raw)} bytes exceeds the 2^40 limit")
        offset = _align(offset)
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append((offset, raw))
        offset += len(raw)
    header = json.dumps(
        {"metadata": ckpt.metadata, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=True,
        allow_nan=False,
    ).encode("utf-8")
    out = bytearray(PREAMBLE.pack(MAGIC, VERSION, len(header)))
    out += header
    out += bytes(_align(len(out)) - len(out))
    start = len(out)
    for off, raw in blobs:
        out += bytes(start + off - len(out))
        out += raw
    return bytes(out)


def save(ckpt: Checkpoint, path) -> None:
    """Write atomically: a sibling temp file is renamed over ``path``."""
    data = to_bytes(ckpt)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ipck-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def _int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise CorruptHeader(name, f"expected a nonnegative integer, got {value!r}")
    return value


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic("magic", "file does not start with IPCK")
    if len(buf) < PREAMBLE.size:
        raise TruncatedData("preamble", "file ends inside the preamble")
    _, version, header_len = PREAMBLE.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersion("version", f"version {version} is not supported")
    if header_len > len(buf) - PREAMBLE.size:
        raise TruncatedData("header_length", f"header of {header_len} bytes runs past end of file")
    raw_header = buf[PREAMBLE.size : PREAMBLE.size + header_len]
    try:
        header = json.loads(raw_header.decode("utf-8"))
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise CorruptHeader("header", f"header is not valid UTF-8 JSON ({exc.__class__.__name__})") from None
    if not isinstance(header, dict) or set(header) != {"metadata", "tensors"}:
        raise CorruptHeader("header", "header must hold exactly 'metadata' and 'tensors'")
    metadata, entries = header["metadata"], header["tensors"]
    if not isinstance(metadata, dict):
        raise CorruptHeader("metadata", "metadata must be an object")
    if not isinstance(entries, list):
        raise CorruptHeader("tensors", "tensor table must be a list")

    start = _align(PREAMBLE.size + header_len)
    tensors = {}
    end = 0
    for i, e in enumerate(entries):
        where = f"tensors[{i}]"
        if not isinstance(e, dict) or set(e) != _ENTRY_KEYS:
            raise CorruptHeader(where, f"entry must hold exactly {sorted(_ENTRY_KEYS)}")
        name = e["name"]
        if not isinstance(name, str) or not name.isascii() or not _NAME.match(name):
            raise CorruptHeader(f"{where}.name", f"invalid tensor name {name!r}")
        if name in tensors:
            raise CorruptHeader(f"{where}.name", f"duplicate tensor name {name!r}")
        if not isinstance(e["dtype"], str) or e["dtype"] not in DTYPES:
            raise CorruptHeader(f"{where}.dtype", f"unknown dtype {e['dtype']!r}")
        dtype = DTYPES[e["dtype"]]
        shape = e["shape"]
        if not isinstance(shape, list):
            raise CorruptHeader(f"{where}.shape", "shape must be a list")
        shape = [_int(s, f"{where}.shape") for s in shape]
        nbytes = _int(e["nbytes"], f"{where}.nbytes")
        offset = _int(e["offset"], f"{where}.offset")
        if nbytes > MAX_TENSOR_BYTES:
            raise OversizeTensor(f"{where}.nbytes", f"{nbytes} bytes exceeds the 2^40 limit")
        if nbytes != int(np.prod(shape, dtype=object)) * dtype.itemsize:
            raise CorruptHeader(f"{where}.nbytes", "byte length disagrees with shape and dtype")
        if offset % ALIGN or offset < end:
            raise CorruptHeader(f"{where}.offset", "offset is misaligned or overlaps the previous tensor")
        if start + offset + nbytes > len(buf):
            raise TruncatedData(f"{where}.offset", "tensor data runs past end of file")
        arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=start + offset)
        tensors[name] = arr.reshape(shape)
        end = offset + nbytes
    expected_len = start + end
    if len(buf) != expected_len:
        if len(buf) < expected_len:
            raise TruncatedData("file_length", "file ends before the data section")
        raise CorruptHeader("file_length", f"{len(buf) - expected_len} trailing bytes after the last tensor")
    return Checkpoint(metadata=metadata, tensors=tensors)
