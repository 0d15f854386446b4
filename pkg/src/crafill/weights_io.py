"""Binary container for named float32 tensors.

Layout:

    bytes 0..8    magic "CRAW0001"
    bytes 8..16   little-endian uint64: manifest length in bytes
    manifest      UTF-8 text; '# key value' metadata lines first, then one
                  line per tensor: 'name f32le d0 d1 d2 d3'
    payloads      raw little-endian float32 in manifest order, each
                  starting on a 64-byte boundary (zero padded)

Saving the result of a load reproduces the original file byte for byte.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import WeightsError

MAGIC = b"CRAW0001"
_ALIGN = 64


def _align(offset: int) -> int:
    return (offset + _ALIGN - 1) // _ALIGN * _ALIGN


def save_container(path, arrays: dict[str, np.ndarray], metadata: dict[str, str]) -> None:
    lines = []
    for key, value in metadata.items():
        text = f"{key} {value}"
        if "\n" in text or not key:
            raise WeightsError(f"invalid metadata entry {key!r}")
        lines.append(f"# {text}")
    for name, arr in arrays.items():
        if not name or any(ch.isspace() for ch in name):
            raise WeightsError(f"invalid tensor name {name!r}")
        if arr.dtype != np.float32 or arr.ndim != 4:
            raise WeightsError(
                f"tensor {name!r} must be 4-D float32, got {arr.dtype} {arr.shape}"
            )
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} f32le {dims}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<Q", len(manifest))
    out += manifest
    for arr in arrays.values():
        pad = _align(len(out)) - len(out)
        out += b"\x00" * pad
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_container(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise WeightsError(f"cannot read weight container {path}: {exc}") from exc
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise WeightsError(f"{path}: corrupt header (bad magic)")
    (manifest_len,) = struct.unpack("<Q", blob[8:16])
    if 16 + manifest_len > len(blob):
        raise WeightsError(f"{path}: truncated manifest")
    try:
        manifest = blob[16 : 16 + manifest_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise WeightsError(f"{path}: manifest is not valid UTF-8") from exc

    metadata: dict[str, str] = {}
    entries: list[tuple[str, tuple[int, ...]]] = []
    for lineno, line in enumerate(manifest.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("# "):
            key, _, value = line[2:].partition(" ")
            metadata[key] = value
            continue
        parts = line.split()
        if len(parts) != 6 or parts[1] != "f32le":
            raise WeightsError(f"{path}: malformed manifest line {lineno}: {line!r}")
        name = parts[0]
        try:
            dims = tuple(int(p) for p in parts[2:])
        except ValueError as exc:
            raise WeightsError(
                f"{path}: bad dims for tensor {name!r} on line {lineno}"
            ) from exc
        if any(d < 1 for d in dims):
            raise WeightsError(f"{path}: non-positive dim for tensor {name!r}")
        entries.append((name, dims))

    arrays: dict[str, np.ndarray] = {}
    offset = 16 + manifest_len
    for name, dims in entries:
        if name in arrays:
            raise WeightsError(f"{path}: duplicate tensor name {name!r}")
        offset = _align(offset)
        nbytes = int(np.prod(dims)) * 4
        if offset + nbytes > len(blob):
            raise WeightsError(f"{path}: truncated payload for tensor {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(dims)), offset=offset)
        arrays[name] = arr.reshape(dims).copy()
        offset += nbytes
    if _align(offset) < offset or offset > len(blob):
        raise WeightsError(f"{path}: payload overruns file")
    if len(blob) - offset >= _ALIGN:
        raise WeightsError(f"{path}: trailing bytes after last payload")
    return arrays, metadata
