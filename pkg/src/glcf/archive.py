"""Flat binary tensor archive used for backbone weights and checkpoints.

File layout: 8-byte magic ``GLCFTNSR``, a 4-byte little-endian manifest
length, the UTF-8 JSON manifest, then the raw payload of little-endian
float32 buffers. The manifest is an object with a ``tensors`` list (entries
``name``/``shape``/``dtype``/``offset``) plus an optional ``meta`` object for
embedded JSON documents such as a checkpoint's ``__config__`` snapshot.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptArchiveError, MissingInputError, UnsupportedFormatError

MAGIC = b"GLCFTNSR"
_SUPPORTED_DTYPES = {"f32"}


def save_tensor_archive(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    meta: dict | None = None,
) -> None:
    """Write ``name -> array`` to ``path``; arrays are stored as float32."""
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset}
        )
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest: dict = {"tensors": entries}
    if meta:
        manifest["meta"] = meta
    blob = json.dumps(manifest).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_tensor_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Load an archive, returning (``name -> float32 array``, meta dict).

    Raises :class:`CorruptArchiveError` when any manifest entry's byte span
    falls outside the payload, and :class:`UnsupportedFormatError` for
    unknown dtypes or a bad magic header.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"tensor archive not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise UnsupportedFormatError(f"not a tensor archive (bad magic): {path}")
    (manifest_len,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    header_end = len(MAGIC) + 4 + manifest_len
    if header_end > len(raw):
        raise CorruptArchiveError(f"manifest length exceeds file size: {path}")
    try:
        manifest = json.loads(raw[len(MAGIC) + 4 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArchiveError(f"manifest does not parse: {path}") from exc

    if isinstance(manifest, list):  # tolerate a bare entry list
        entries, meta = manifest, {}
    else:
        entries = manifest.get("tensors", [])
        meta = manifest.get("meta", {})

    payload = raw[header_end:]
    tensors: dict[str, np.ndarray] = {}
    for entry in entries:
        name = entry["name"]
        if name in tensors:
            raise CorruptArchiveError(f"duplicate tensor name {name!r}: {path}")
        dtype = entry["dtype"]
        if dtype not in _SUPPORTED_DTYPES:
            raise UnsupportedFormatError(f"unsupported dtype {dtype!r} for {name!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + count * 4
        if start < 0 or end > len(payload):
            raise CorruptArchiveError(
                f"tensor {name!r} spans [{start}, {end}) outside payload of "
                f"{len(payload)} bytes: {path}"
            )
        tensors[name] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
    return tensors, meta
