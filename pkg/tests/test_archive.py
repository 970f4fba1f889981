import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glcf.archive import MAGIC, load_tensor_archive, save_tensor_archive
from glcf.errors import CorruptArchiveError, MissingInputError, UnsupportedFormatError


def test_empty_manifest_roundtrip(tmp_path):
    path = tmp_path / "empty.tnsr"
    save_tensor_archive(path, {})
    tensors, meta = load_tensor_archive(path)
    assert tensors == {}
    assert meta == {}


def test_roundtrip_identity(tmp_path):
    path = tmp_path / "w.tnsr"
    save_tensor_archive(path, {"w": np.ones((2, 2), dtype=np.float32)})
    tensors, _ = load_tensor_archive(path)
    np.testing.assert_array_equal(tensors["w"], np.ones((2, 2), dtype=np.float32))


def test_meta_roundtrip(tmp_path):
    path = tmp_path / "m.tnsr"
    doc = {"__config__": {"a": 1, "b": [1, 2, 3]}}
    save_tensor_archive(path, {"x": np.zeros(3)}, meta=doc)
    _, meta = load_tensor_archive(path)
    assert meta == doc


def test_payload_shorter_than_manifest_declares(tmp_path):
    path = tmp_path / "bad.tnsr"
    manifest = {"tensors": [{"name": "w", "shape": [4], "dtype": "f32", "offset": 0}]}
    blob = json.dumps(manifest).encode()
    payload = np.zeros(3, dtype="<f4").tobytes()  # 3 floats, manifest wants 4
    path.write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob + payload)
    with pytest.raises(CorruptArchiveError):
        load_tensor_archive(path)


def test_unknown_dtype(tmp_path):
    path = tmp_path / "bad.tnsr"
    manifest = {"tensors": [{"name": "w", "shape": [1], "dtype": "f64", "offset": 0}]}
    blob = json.dumps(manifest).encode()
    path.write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob + b"\0" * 8)
    with pytest.raises(UnsupportedFormatError):
        load_tensor_archive(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.tnsr"
    path.write_bytes(b"NOTMAGIC" + b"\0" * 16)
    with pytest.raises(UnsupportedFormatError):
        load_tensor_archive(path)


def test_missing_file(tmp_path):
    with pytest.raises(MissingInputError):
        load_tensor_archive(tmp_path / "nope.tnsr")


def test_duplicate_names_rejected(tmp_path):
    path = tmp_path / "dup.tnsr"
    entry = {"name": "w", "shape": [1], "dtype": "f32", "offset": 0}
    blob = json.dumps({"tensors": [entry, entry]}).encode()
    path.write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob + b"\0" * 4)
    with pytest.raises(CorruptArchiveError):
        load_tensor_archive(path)


def test_manifest_length_beyond_file(tmp_path):
    path = tmp_path / "trunc.tnsr"
    path.write_bytes(MAGIC + struct.pack("<I", 9999) + b"{}")
    with pytest.raises(CorruptArchiveError):
        load_tensor_archive(path)


@settings(max_examples=25, deadline=None)
@given(
    st.dictionaries(
        st.text(alphabet="abcdefg._", min_size=1, max_size=12),
        st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32),
                 min_size=0, max_size=8),
        max_size=4,
    )
)
def test_roundtrip_property(tmp_path_factory, tensors):
    path = tmp_path_factory.mktemp("arch") / "t.tnsr"
    arrays = {k: np.asarray(v, dtype=np.float32) for k, v in tensors.items()}
    save_tensor_archive(path, arrays)
    loaded, _ = load_tensor_archive(path)
    assert set(loaded) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], arrays[k])
