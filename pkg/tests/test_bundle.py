import json

import numpy as np
import pytest

from dissectpoison.bundle import load_bundle, read_manifest, save_bundle
from dissectpoison.errors import IntegrityError, MissingTensorError


def test_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "f": rng.normal(size=(2, 3, 4)).astype(np.float32),
        "u": rng.integers(0, 2, size=(5, 6)).astype(np.uint8),
        "i": rng.integers(-9, 9, size=7).astype(np.int32),
        "scalar": np.float32(1.25).reshape(()),
    }
    tensors["f"][0, 0, 0] = np.float32(np.nextafter(np.float32(1), np.float32(2)))
    back = load_bundle(save_bundle(tmp_path / "b", tensors))
    for name, arr in tensors.items():
        assert back[name].dtype == arr.dtype
        assert back[name].tobytes() == arr.tobytes()


def test_manifest_entries(tmp_path):
    save_bundle(tmp_path, {"a": np.zeros((2, 2), np.float32), "b": np.zeros(3, np.uint8)})
    entries = read_manifest(tmp_path)
    assert entries["a"] == {"name": "a", "dtype": "f32", "shape": [2, 2], "file": "data.bin", "byte_offset": 0}
    assert entries["b"]["byte_offset"] == 16


def test_missing_tensor_is_reported(tmp_path):
    save_bundle(tmp_path, {"a": np.zeros(2, np.float32)})
    with pytest.raises(MissingTensorError):
        load_bundle(tmp_path, ["a", "b"])


def test_overrun_is_integrity_error(tmp_path):
    save_bundle(tmp_path, {"a": np.zeros((2, 2), np.float32)})
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["entries"][0]["shape"] = [4, 4]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IntegrityError):
        load_bundle(tmp_path)


def test_unknown_dtype_and_missing_manifest(tmp_path):
    with pytest.raises(IntegrityError):
        load_bundle(tmp_path)
    save_bundle(tmp_path, {"a": np.zeros(2, np.float32)})
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["entries"][0]["dtype"] = "f64"
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IntegrityError):
        load_bundle(tmp_path)


def test_unsupported_dtype_cannot_be_saved(tmp_path):
    with pytest.raises(TypeError):
        save_bundle(tmp_path, {"a": np.zeros(2, np.float64)})
