"""Manifest-plus-raw-tensor container.

A container is a directory (or a single uncompressed zip archive) holding one
``manifest.json`` and one raw little-endian binary file per tensor. The
manifest records, per entry: file name, dtype, shape, and byte order. A free
``meta`` dict carries arbitrary JSON (configs, camera rigs, format tags).

The layout is deliberately primitive: bit-exact, language-neutral, and
readable with nothing but a JSON parser and ``fromfile``.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

CONTAINER_FORMAT_VERSION = 1

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "int32": np.dtype("<i4"),
    "uint8": np.dtype("u1"),
}


class ContainerError(ValueError):
    """Malformed container: bad manifest, shape mismatch, unknown version."""


def _dtype_name(arr: np.ndarray) -> str:
    for name, dt in _DTYPES.items():
        if arr.dtype == dt.newbyteorder("="):
            return name
    raise ContainerError(f"unsupported dtype {arr.dtype}; use one of {list(_DTYPES)}")


def _entry_filename(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def build_manifest(tensors: dict[str, np.ndarray], meta: dict) -> dict:
    entries = {}
    for name, arr in tensors.items():
        entries[name] = {
            "file": _entry_filename(name),
            "dtype": _dtype_name(arr),
            "shape": list(arr.shape),
            "byte_order": "little",
        }
    return {
        "format_version": CONTAINER_FORMAT_VERSION,
        "entries": entries,
        "meta": meta,
    }


def _encode(arr: np.ndarray) -> bytes:
    dt = _DTYPES[_dtype_name(arr)]
    return np.ascontiguousarray(arr, dtype=dt).tobytes()


def _decode(raw: bytes, spec: dict, name: str) -> np.ndarray:
    if spec.get("byte_order", "little") != "little":
        raise ContainerError(f"entry '{name}': unsupported byte order {spec['byte_order']}")
    dtype = spec["dtype"]
    if dtype not in _DTYPES:
        raise ContainerError(f"entry '{name}': unknown dtype '{dtype}'")
    dt = _DTYPES[dtype]
    shape = tuple(spec["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(raw) != expected:
        raise ContainerError(
            f"entry '{name}': expected {expected} bytes for shape {shape} "
            f"({dtype}), found {len(raw)}"
        )
    return np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def _check_manifest(manifest: dict) -> dict:
    version = manifest.get("format_version")
    if version != CONTAINER_FORMAT_VERSION:
        raise ContainerError(f"unknown container format version: {version!r}")
    return manifest


def write_dir(path: Path | str, tensors: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(tensors, meta)
    for name, arr in tensors.items():
        (path / _entry_filename(name)).write_bytes(_encode(arr))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_dir(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise ContainerError(f"no manifest.json in {path}")
    manifest = _check_manifest(json.loads(manifest_path.read_text()))
    tensors = {}
    for name, spec in manifest["entries"].items():
        raw = (path / spec["file"]).read_bytes()
        tensors[name] = _decode(raw, spec, name)
    return tensors, manifest.get("meta", {})


def write_zip(path: Path | str, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Single-file variant: the same layout inside an uncompressed zip.

    Entries are written in sorted order with a fixed timestamp, so identical
    content produces an identical archive byte-for-byte.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(tensors, meta)
    items = [("manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())]
    for name in sorted(tensors):
        items.append((_entry_filename(name), _encode(tensors[name])))
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for fname, data in sorted(items):
            info = zipfile.ZipInfo(fname, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)
    path.write_bytes(buf.getvalue())


def read_zip(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        names = set(zf.namelist())
        if "manifest.json" not in names:
            raise ContainerError(f"no manifest.json in archive {path}")
        manifest = _check_manifest(json.loads(zf.read("manifest.json")))
        tensors = {}
        for name, spec in manifest["entries"].items():
            if spec["file"] not in names:
                raise ContainerError(f"entry '{name}': missing file {spec['file']}")
            tensors[name] = _decode(zf.read(spec["file"]), spec, name)
    return tensors, manifest.get("meta", {})
