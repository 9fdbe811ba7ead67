"""Self-describing binary container shared by datasets and checkpoints.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"FLOWINR\\0"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    manifest length M in bytes
    offset 20  M bytes   UTF-8 JSON manifest
    offset 20+M          blob section

The manifest is an object with keys ``kind`` (str), ``meta`` (free JSON),
``data_bytes`` (int) and ``arrays``: a list of ``{name, dtype, shape, offset,
nbytes}`` where dtype is ``"<f8"`` or ``"<i8"`` and offset is relative to the
start of the blob section. Blobs are C-order. The file must end exactly at
``20 + M + data_bytes``.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FLOWINR\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class ContainerError(ValueError):
    """Corrupt, truncated or incompatible container file."""


def _dtype_tag(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.floating):
        return "<f8"
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return "<i8"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def write_container(path, kind: str, arrays: Mapping[str, np.ndarray], meta: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = json.dumps({"kind": kind, "meta": meta, "data_bytes": offset, "arrays": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        manifest, _ = _parse_head(fh, head)
    return manifest


def _parse_head(fh, head: bytes):
    if len(head) < _HEADER.size:
        raise ContainerError("truncated header")
    magic, version, mlen = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ContainerError("bad magic")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    raw = fh.read(mlen)
    if len(raw) != mlen:
        raise ContainerError("truncated manifest")
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable manifest: {exc}") from None
    return manifest, _HEADER.size + mlen


def read_container(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        manifest, start = _parse_head(fh, fh.read(_HEADER.size))
        if kind is not None and manifest.get("kind") != kind:
            raise ContainerError(f"expected a {kind!r} container, found {manifest.get('kind')!r}")
        if start + manifest["data_bytes"] != size:
            raise ContainerError("length mismatch between manifest and file")
        body = fh.read()
    arrays = {}
    for e in manifest["arrays"]:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise ContainerError(f"unknown dtype {e['dtype']}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * dt.itemsize != e["nbytes"] or e["offset"] + e["nbytes"] > len(body):
            raise ContainerError(f"blob {e['name']} has inconsistent length")
        arr = np.frombuffer(body, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return arrays, manifest["meta"]
