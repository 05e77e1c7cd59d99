"""Tensor bundles: a directory holding ``manifest.json`` plus flat little-endian ``.bin`` files.

Each manifest entry is ``{name, dtype, shape, file, byte_offset}`` with dtype
one of ``f32``, ``u8``, ``i32``. Arrays are stored row-major; reading back
gives bit-identical arrays.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import IntegrityError, MissingTensorError

MANIFEST = "manifest.json"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1"), "i32": np.dtype("<i4")}
_CODES = {np.dtype("float32"): "f32", np.dtype("uint8"): "u8", np.dtype("int32"): "i32"}


def _code(arr: np.ndarray) -> str:
    try:
        return _CODES[arr.dtype.newbyteorder("=")]
    except KeyError:
        raise TypeError(f"bundle cannot store dtype {arr.dtype}") from None


def save_bundle(path, tensors: Mapping[str, np.ndarray], file: str = "data.bin") -> Path:
    """Write all ``tensors`` into one ``.bin`` file and a manifest describing them."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / file, "wb") as fh:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            code = _code(arr)
            raw = arr.astype(_DTYPES[code], copy=False).tobytes(order="C")
            entries.append(
                {"name": name, "dtype": code, "shape": list(arr.shape), "file": file, "byte_offset": offset}
            )
            fh.write(raw)
            offset += len(raw)
    with open(path / MANIFEST, "w") as fh:
        json.dump({"entries": entries}, fh, indent=1, sort_keys=True)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        with open(path / MANIFEST) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise IntegrityError(f"{path} has no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path / MANIFEST} is not valid JSON: {exc}") from None
    return {e["name"]: e for e in manifest.get("entries", [])}


def load_bundle(path, names=None) -> dict:
    """Read a bundle back; raises ``IntegrityError`` on any size/shape inconsistency."""
    path = Path(path)
    entries = read_manifest(path)
    if names is not None:
        missing = [n for n in names if n not in entries]
        if missing:
            raise MissingTensorError(f"{path}: missing tensor(s) {missing}")
        entries = {n: entries[n] for n in names}
    out = {}
    for name, e in entries.items():
        if e.get("dtype") not in _DTYPES:
            raise IntegrityError(f"{path}: tensor {name!r} has unknown dtype {e.get('dtype')!r}")
        dtype = _DTYPES[e["dtype"]]
        shape = tuple(int(s) for s in e["shape"])
        if any(s < 0 for s in shape):
            raise IntegrityError(f"{path}: tensor {name!r} has negative dimension")
        count = int(np.prod(shape, dtype=np.int64))
        file = path / e["file"]
        if not file.exists():
            raise MissingTensorError(f"{path}: data file {e['file']!r} for {name!r} not found")
        size = file.stat().st_size
        end = int(e["byte_offset"]) + count * dtype.itemsize
        if int(e["byte_offset"]) < 0 or end > size:
            raise IntegrityError(f"{path}: tensor {name!r} with shape {list(shape)} overruns {e['file']}")
        arr = np.fromfile(file, dtype=dtype, count=count, offset=int(e["byte_offset"]))
        out[name] = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=False)
    return out
