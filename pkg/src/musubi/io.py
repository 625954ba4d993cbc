from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT_VERSION = 1
DATASET_MAGIC = b"MUSUBIDS"
CHECKPOINT_MAGIC = b"MUSUBICK"

_PREFIX = struct.Struct("<8sQQ")
_STORED_DTYPES = {"f8": "<f8", "i8": "<i8", "bool": "<u1"}


class ContainerFormatError(ValueError):
    """File is not a readable container (bad magic, truncated, malformed header)."""


class ContainerVersionError(ContainerFormatError):
    """Container was written by an incompatible format version."""


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.bool_:
        return "bool"
    if np.issubdtype(arr.dtype, np.integer):
        return "i8"
    if np.issubdtype(arr.dtype, np.floating):
        return "f8"
    raise TypeError(f"unsupported array dtype {arr.dtype}")


def write_container(
    path: str | Path,
    magic: bytes,
    header: Mapping[str, Any],
    arrays: Mapping[str, np.ndarray],
) -> Path:
    """Write ``header`` (JSON) and named arrays as one little-endian container.

    Parameters
    ----------
    magic:
        8-byte file signature.
    header:
        JSON-serializable metadata; the array table is added under ``arrays``.
    """

    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    table = []
    blobs = []
    offset = 0
    for name, value in arrays.items():
        arr = np.asarray(value)
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr.astype(_STORED_DTYPES[tag])).tobytes()
        table.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    payload = dict(header)
    payload["arrays"] = table
    header_bytes = json.dumps(payload, sort_keys=True).encode("utf-8")

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)
    return p


def read_container(path: str | Path, magic: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    p = Path(path)
    data = p.read_bytes()
    if len(data) < _PREFIX.size:
        raise ContainerFormatError(f"{p}: truncated container ({len(data)} bytes)")
    file_magic, version, header_len = _PREFIX.unpack_from(data, 0)
    if file_magic != magic:
        raise ContainerFormatError(f"{p}: bad magic {file_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerVersionError(
            f"{p}: container version {version} is not supported (expected {FORMAT_VERSION})"
        )
    body_start = _PREFIX.size + header_len
    if len(data) < body_start:
        raise ContainerFormatError(f"{p}: truncated header")
    try:
        header = json.loads(data[_PREFIX.size:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{p}: malformed header") from exc
    if not isinstance(header, dict) or not isinstance(header.get("arrays"), list):
        raise ContainerFormatError(f"{p}: header has no array table")

    arrays: dict[str, np.ndarray] = {}
    for entry in header.pop("arrays"):
        try:
            name, tag = entry["name"], entry["dtype"]
            shape = tuple(int(s) for s in entry["shape"])
            start = body_start + int(entry["offset"])
            stored = np.dtype(_STORED_DTYPES[tag])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerFormatError(f"{p}: malformed array entry {entry!r}") from exc
        count = int(np.prod(shape, dtype=np.int64))
        end = start + count * stored.itemsize
        if end > len(data):
            raise ContainerFormatError(f"{p}: truncated array {name!r}")
        arr = np.frombuffer(data, dtype=stored, count=count, offset=start).reshape(shape).copy()
        arrays[name] = arr.astype(bool) if tag == "bool" else arr
    return header, arrays
