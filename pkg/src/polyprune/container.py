"""Bit-exact binary container for weight matrices and calibration statistics.

Layout is the safetensors interchange convention: an 8-byte little-endian
header length, a UTF-8 JSON header mapping tensor names to
``{"dtype": "F32", "shape": [...], "data_offsets": [begin, end]}`` plus an
optional ``"__metadata__"`` string-to-string map, followed by the raw
little-endian f32 buffers. Only F32 tensors are supported in v1.

Saving is canonical (header keys sorted, compact JSON, data laid out in
sorted name order), so identical containers always serialize to identical
bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = "1"

_F32 = np.dtype("<f4")


class ContainerError(ValueError):
    """Raised for malformed, truncated, or inconsistent container files."""


@dataclass
class Container:
    """An in-memory container: named f32 tensors plus string metadata."""

    metadata: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self.tensors:
            raise ContainerError(f"duplicate tensor name: {name!r}")
        self.tensors[name] = np.ascontiguousarray(array, dtype=_F32)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def _validate_for_save(container: Container) -> None:
    for key, value in container.metadata.items():
        if not isinstance(key, str) or not isinstance(value, str):
            raise ContainerError("metadata must map strings to strings")
    for name, arr in container.tensors.items():
        if not isinstance(name, str) or not name:
            raise ContainerError("tensor names must be non-empty strings")
        if name == "__metadata__":
            raise ContainerError('"__metadata__" is reserved and cannot name a tensor')
        if arr.dtype != _F32:
            raise ContainerError(f"tensor {name!r} is not f32")
        if not np.all(np.isfinite(arr)):
            raise ContainerError(f"tensor {name!r} contains non-finite values")


def save(container: Container, path) -> None:
    """Write ``container`` to ``path`` in canonical byte-deterministic form."""
    _validate_for_save(container)

    metadata = dict(container.metadata)
    metadata.setdefault("format_version", FORMAT_VERSION)

    header: dict[str, object] = {"__metadata__": metadata}
    offset = 0
    names = sorted(container.tensors)
    for name in names:
        arr = container.tensors[name]
        nbytes = arr.size * 4
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + nbytes],
        }
        offset += nbytes

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            fh.write(container.tensors[name].tobytes(order="C"))


def load(path) -> Container:
    """Read a container, validating bounds before touching any tensor data."""
    with open(path, "rb") as fh:
        raw = fh.read()

    if len(raw) < 8:
        raise ContainerError("truncated file: missing header length prefix")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise ContainerError("truncated file: header length exceeds file size")

    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise ContainerError("malformed header: not a JSON object")

    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise ContainerError("malformed __metadata__: must map strings to strings")
    version = metadata.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ContainerError(f"version mismatch: unsupported format_version {version!r}")

    data = raw[8 + header_len :]
    container = Container(metadata=dict(metadata))

    extents: list[tuple[int, int, str]] = []
    for name, entry in header.items():
        if not isinstance(entry, dict):
            raise ContainerError(f"malformed entry for tensor {name!r}")
        dtype = entry.get("dtype")
        if dtype != "F32":
            raise ContainerError(f"unknown dtype {dtype!r} for tensor {name!r}")
        shape = entry.get("shape")
        if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
            raise ContainerError(f"malformed shape for tensor {name!r}")
        offsets = entry.get("data_offsets")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)
        ):
            raise ContainerError(f"malformed data_offsets for tensor {name!r}")
        begin, end = offsets
        if begin < 0 or end < begin or end > len(data):
            raise ContainerError(f"out-of-bounds extent for tensor {name!r}")
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if end - begin != expected:
            raise ContainerError(
                f"extent of tensor {name!r} is {end - begin} bytes, shape needs {expected}"
            )
        extents.append((begin, end, name))

    extents.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(extents, extents[1:]):
        if b1 < e0:
            raise ContainerError(f"overlapping extents for tensors {n0!r} and {n1!r}")

    for name, entry in header.items():
        begin, end = entry["data_offsets"]
        arr = np.frombuffer(data[begin:end], dtype=_F32).reshape(entry["shape"])
        container.tensors[name] = arr.copy()

    return container
