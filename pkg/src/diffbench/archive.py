"""Named-tensor archive: the on-disk container for checkpoints and encoder weights.

Layout (all integers little-endian):

    magic   b"DBAR1\\n"
    u64     manifest byte length
    bytes   manifest JSON (utf-8, sorted keys, compact separators)
    bytes   tensor payload, entries concatenated in manifest order

The manifest records ``format_version``, a free-form ``meta`` document, and a
``tensors`` list sorted by name with dtype/shape/offset/nbytes per entry.
Writing is canonical: saving the result of a load reproduces the input file
byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import ArchiveError

MAGIC = b"DBAR1\n"

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "uint8": "|u1",
}
_TORCH_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.uint8: "uint8",
}


def _to_array(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        if t.dtype not in _TORCH_DTYPES:
            raise ArchiveError(f"unsupported tensor dtype {t.dtype}")
        return t.detach().cpu().contiguous().numpy()
    return np.asarray(t)


def _dtype_name(a: np.ndarray) -> str:
    for name, code in _DTYPES.items():
        if np.dtype(code) == a.dtype:
            return name
    raise ArchiveError(f"unsupported dtype {a.dtype}")


def save_archive(path, tensors: dict, meta: dict | None = None,
                 format_version: str = "ckpt-v1") -> None:
    """Write a canonical archive of named tensors."""
    arrays = {}
    for name, t in tensors.items():
        a = _to_array(t)
        name_of = _dtype_name(np.ascontiguousarray(a))
        arrays[name] = np.ascontiguousarray(a, dtype=np.dtype(_DTYPES[name_of]))

    entries = []
    offset = 0
    for name in sorted(arrays):
        a = arrays[name]
        entries.append({
            "name": name,
            "dtype": _dtype_name(a),
            "shape": list(a.shape),
            "offset": offset,
            "nbytes": int(a.nbytes),
        })
        offset += a.nbytes

    manifest = {
        "format_version": format_version,
        "meta": meta or {},
        "tensors": entries,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for name in sorted(arrays):
            f.write(arrays[name].tobytes())
    tmp.replace(path)


def load_archive(path, expected_version: str | None = None):
    """Read an archive. Returns (tensors: dict[str, torch.Tensor], meta, format_version)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ArchiveError(f"cannot read archive {path}: {e}") from e

    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise ArchiveError(f"{path} is not a tensor archive (bad magic)")
    n = int.from_bytes(raw[len(MAGIC): len(MAGIC) + 8], "little")
    header_end = len(MAGIC) + 8 + n
    if len(raw) < header_end:
        raise ArchiveError(f"{path} is truncated (manifest)")
    try:
        manifest = json.loads(raw[len(MAGIC) + 8: header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArchiveError(f"{path}: corrupt manifest: {e}") from e

    version = manifest.get("format_version")
    if expected_version is not None and version != expected_version:
        raise ArchiveError(f"{path}: format version {version!r}, expected {expected_version!r}")

    payload = raw[header_end:]
    tensors = {}
    for entry in manifest["tensors"]:
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise ArchiveError(f"{path}: unknown dtype {dtype!r} for tensor {entry['name']!r}")
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise ArchiveError(f"{path} is truncated (tensor {entry['name']!r})")
        a = np.frombuffer(payload[lo:hi], dtype=np.dtype(_DTYPES[dtype])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(a.copy())
    return tensors, manifest.get("meta", {}), version
