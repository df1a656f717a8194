import numpy as np
import pytest

from amdc import serialization as S
from amdc.errors import FormatError, ShapeError


def test_tensor_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(3,), (2, 4), (2, 3, 4), ()]:
        arr = rng.random(shape)
        p = tmp_path / "t.tnsr"
        S.save_tensor(p, arr)
        back = S.load_tensor(p)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.tnsr"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError):
        S.load_tensor(p)


def test_truncated_payload_rejected(tmp_path):
    arr = np.arange(12.0).reshape(3, 4)
    blob = S.tensor_to_bytes(arr)
    p = tmp_path / "trunc.tnsr"
    p.write_bytes(blob[:-8])
    with pytest.raises(FormatError):
        S.load_tensor(p)


def test_trailing_bytes_rejected(tmp_path):
    blob = S.tensor_to_bytes(np.ones((2, 2)))
    p = tmp_path / "trail.tnsr"
    p.write_bytes(blob + b"xx")
    with pytest.raises(FormatError):
        S.load_tensor(p)


def test_zero_extent_shape_rejected():
    with pytest.raises(ShapeError):
        S.tensor_to_bytes(np.empty((0, 3)))


def test_named_sections_preserve_order_and_values():
    rng = np.random.default_rng(1)
    sections = {f"p{i}": rng.random((i + 1, 2)) for i in range(5)}
    blob = S.pack_named_tensors(sections)
    back, end = S.unpack_named_tensors(blob)
    assert end == len(blob)
    assert list(back) == list(sections)
    for k in sections:
        assert np.array_equal(back[k], sections[k])


def test_sidecar_round_trip(tmp_path):
    meta = {"wavelengths_nm": [450.0, 550.0], "noise_sigma": 0.01}
    p = tmp_path / "x.tnsr.json"
    S.save_sidecar(p, meta)
    assert S.load_sidecar(p) == meta
    with pytest.raises(FormatError):
        S.load_sidecar(tmp_path / "missing.json")
