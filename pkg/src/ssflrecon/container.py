"""The ``CINEv1`` binary container.

Layout (all integers little-endian)::

    b"CINEv1"            6-byte magic
    uint32               header length H in bytes
    H bytes              UTF-8 JSON header
    payload              concatenated arrays, in header field order

The header carries ``kind`` (``DATASET``, ``CKPT`` or ``TENSORS``), a
free-form ``meta`` object, ``payload_bytes`` and a ``fields`` table of
``{name, dtype, shape, offset, nbytes}`` with offsets relative to the start
of the payload. Complex arrays are stored as interleaved (re, im) floats.

dtype codes: ``c8`` complex / 2x float32, ``f4`` float32, ``c16`` complex
/ 2x float64, ``f8`` float64, ``i8`` int64.
"""

from __future__ import annotations

import json
import os
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MAGIC",
    "ContainerError",
    "BadMagicError",
    "TruncatedError",
    "DimensionError",
    "Container",
    "write_container",
    "read_container",
    "ContainerReader",
]

MAGIC = b"CINEv1"
_HEADER_LEN = struct.Struct("<I")
_PREFIX = len(MAGIC) + _HEADER_LEN.size
MAX_ELEMENTS = 2**31

_DTYPES = {
    "c8": np.dtype("<c8"),
    "f4": np.dtype("<f4"),
    "c16": np.dtype("<c16"),
    "f8": np.dtype("<f8"),
    "i8": np.dtype("<i8"),
}


class ContainerError(Exception):
    """Base class for malformed container files."""


class BadMagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class DimensionError(ContainerError):
    pass


def _code_for(arr: np.ndarray, single: bool) -> str:
    if np.iscomplexobj(arr):
        return "c8" if single or arr.dtype == np.complex64 else "c16"
    if np.issubdtype(arr.dtype, np.integer) and not single:
        return "i8"
    if np.issubdtype(arr.dtype, np.bool_) or np.issubdtype(arr.dtype, np.integer):
        return "f4"
    return "f4" if single or arr.dtype == np.float32 else "f8"


@dataclass
class Container:
    kind: str
    meta: dict = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def write_container(path: str | os.PathLike, kind: str, meta: Mapping, arrays: Mapping[str, np.ndarray],
                    single: bool = True) -> None:
    """Write arrays in insertion order. ``single`` forces float32 storage."""
    fields = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code_for(arr, single)
        data = np.ascontiguousarray(arr.astype(_DTYPES[code]))
        blob = data.tobytes()
        fields.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"kind": kind, "meta": dict(meta), "payload_bytes": offset, "fields": fields},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER_LEN.pack(len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


class ContainerReader:
    """Lazy reader: parses the header, reads individual fields by offset."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        size = self.path.stat().st_size
        with open(self.path, "rb") as fh:
            prefix = fh.read(_PREFIX)
            if len(prefix) < len(MAGIC) or prefix[: len(MAGIC)] != MAGIC:
                raise BadMagicError(f"{self.path}: bad magic, not a CINEv1 file")
            if len(prefix) < _PREFIX:
                raise TruncatedError(f"{self.path}: truncated before header length")
            (hlen,) = _HEADER_LEN.unpack(prefix[len(MAGIC):])
            raw = fh.read(hlen)
        if len(raw) != hlen:
            raise TruncatedError(f"{self.path}: truncated header ({len(raw)} of {hlen} bytes)")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{self.path}: unreadable header: {exc}") from None
        self.payload_start = _PREFIX + hlen
        declared = self.payload_start + int(header["payload_bytes"])
        if declared != size:
            raise TruncatedError(f"{self.path}: header declares {declared} bytes, file has {size}")
        self.kind: str = header["kind"]
        self.meta: dict = header["meta"]
        self.fields: dict[str, dict] = {}
        for f in header["fields"]:
            self._validate_field(f, int(header["payload_bytes"]))
            self.fields[f["name"]] = f

    def _validate_field(self, f: dict, payload_bytes: int) -> None:
        if f["dtype"] not in _DTYPES:
            raise DimensionError(f"{self.path}: field {f['name']!r} has unknown dtype {f['dtype']!r}")
        shape = f["shape"]
        if any((not isinstance(d, int)) or d < 0 for d in shape):
            raise DimensionError(f"{self.path}: field {f['name']!r} has invalid dims {shape}")
        count = 1
        for d in shape:
            count *= d
        if count > MAX_ELEMENTS:
            raise DimensionError(f"{self.path}: field {f['name']!r} dims {shape} overflow the element limit")
        if count * _DTYPES[f["dtype"]].itemsize != f["nbytes"]:
            raise DimensionError(f"{self.path}: field {f['name']!r} dims {shape} disagree with nbytes={f['nbytes']}")
        if f["offset"] < 0 or f["offset"] + f["nbytes"] > payload_bytes:
            raise TruncatedError(f"{self.path}: field {f['name']!r} extends past the payload")

    def __contains__(self, name: str) -> bool:
        return name in self.fields

    def read(self, name: str) -> np.ndarray:
        f = self.fields[name]
        with open(self.path, "rb") as fh:
            fh.seek(self.payload_start + f["offset"])
            buf = fh.read(f["nbytes"])
        if len(buf) != f["nbytes"]:
            raise TruncatedError(f"{self.path}: short read for field {name!r}")
        return np.frombuffer(buf, dtype=_DTYPES[f["dtype"]]).reshape(f["shape"]).copy()

    def read_all(self) -> Container:
        return Container(self.kind, dict(self.meta), {name: self.read(name) for name in self.fields})


def read_container(path: str | os.PathLike, kind: str | None = None) -> Container:
    reader = ContainerReader(path)
    if kind is not None and reader.kind != kind:
        raise ContainerError(f"{path}: expected a {kind} container, found {reader.kind}")
    return reader.read_all()
