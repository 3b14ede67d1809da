from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kvq.tensor_io import (
    BadMagicError,
    CalibrationSet,
    NonFiniteValueError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    VersionMismatchError,
    dump_calibration_dirs,
    load_calibration_dirs,
    read_tensor,
    write_tensor,
)


def _raw(dims, payload, magic=b"KVQT", version=1, dtype=0):
    head = struct.pack("<4sIII", magic, version, dtype, len(dims)) + struct.pack(f"<{len(dims)}Q", *dims)
    return head + np.asarray(payload, dtype="<f4").tobytes()


def test_reads_hand_built_file(tmp_path):
    p = tmp_path / "t.kvqt"
    p.write_bytes(_raw([2, 2], [1.0, 2.0, 3.0, 4.0]))
    t = read_tensor(p)
    assert t.shape == (2, 2)
    assert t.dtype == np.float32
    np.testing.assert_array_equal(t.reshape(-1), [1, 2, 3, 4])


def test_empty_dims(tmp_path):
    p = tmp_path / "e.kvqt"
    p.write_bytes(_raw([0], []))
    t = read_tensor(p)
    assert t.shape == (0,) and t.size == 0


def test_byte_layout_is_little_endian(tmp_path):
    p = tmp_path / "le.kvqt"
    write_tensor(np.array([1.0], dtype=np.float32), p)
    raw = p.read_bytes()
    assert raw[:4] == b"KVQT"
    assert raw[4:16] == bytes([1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0])
    assert raw[16:24] == (1).to_bytes(8, "little")
    assert raw[24:] == bytes.fromhex("0000803f")


@pytest.mark.parametrize(
    "raw, err",
    [
        (_raw([2], [1.0, 2.0], magic=b"KVQX"), BadMagicError),
        (_raw([2], [1.0, 2.0], version=2), VersionMismatchError),
        (_raw([2], [1.0, 2.0], dtype=1), UnsupportedDtypeError),
        (_raw([3], [1.0, 2.0]), TruncatedPayloadError),
        (_raw([2], [1.0, np.nan]), NonFiniteValueError),
        (_raw([2], [np.inf, 0.0]), NonFiniteValueError),
        (b"KV", TruncatedPayloadError),
    ],
)
def test_malformed_files_raise_distinct_errors(tmp_path, raw, err):
    p = tmp_path / "bad.kvqt"
    p.write_bytes(raw)
    with pytest.raises(err):
        read_tensor(p)


def test_roundtrip_examples(tmp_path):
    a = np.array([-1.5, 0.0, 2.25], dtype=np.float32)
    write_tensor(a, tmp_path / "a.kvqt")
    np.testing.assert_array_equal(read_tensor(tmp_path / "a.kvqt"), a)
    b = np.arange(8, dtype=np.float32).reshape(1, 4, 2)
    write_tensor(b, tmp_path / "b.kvqt")
    assert read_tensor(tmp_path / "b.kvqt").shape == (1, 4, 2)


def test_write_to_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        write_tensor(np.zeros(2, np.float32), tmp_path / "missing" / "dir" / "x.kvqt")


def test_write_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError):
        write_tensor(np.array([np.nan], np.float32), tmp_path / "n.kvqt")


finite_f32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5), elements=finite_f32))
def test_roundtrip_is_bitwise(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("rt") / "x.kvqt"
    write_tensor(a, p)
    b = read_tensor(p)
    assert b.shape == a.shape
    assert b.tobytes() == a.tobytes()


def test_calibration_set_checks_shapes():
    k = [np.zeros((4, 3), np.float32)]
    with pytest.raises(ValueError):
        CalibrationSet(k, [np.zeros((4, 2), np.float32)])
    with pytest.raises(ValueError):
        CalibrationSet([], [])
    with pytest.raises(ValueError):
        CalibrationSet(k, k, grads_keys=[np.zeros((3, 3))], grads_values=k)


def test_calibration_dirs_roundtrip(tmp_path, rng):
    sets = {}
    for layer in range(2):
        ks = [rng.standard_normal((5, 4)).astype(np.float32) for _ in range(3)]
        vs = [rng.standard_normal((5, 4)).astype(np.float32) for _ in range(3)]
        sets[layer] = CalibrationSet(ks, vs, [k * 2 for k in ks], [v * 3 for v in vs])
    dump_calibration_dirs(sets, tmp_path)
    back = load_calibration_dirs(tmp_path / "keys", tmp_path / "values", tmp_path / "grads")
    assert sorted(back) == [0, 1]
    for layer, cs in sets.items():
        for a, b in zip(cs.keys + cs.grads_values, back[layer].keys + back[layer].grads_values):
            np.testing.assert_array_equal(a, b)


def test_calibration_dirs_detect_missing_gradients(tmp_path, rng):
    k = [rng.standard_normal((2, 2)).astype(np.float32)]
    dump_calibration_dirs({0: CalibrationSet(k, k)}, tmp_path)
    with pytest.raises(ValueError):
        load_calibration_dirs(tmp_path / "keys", tmp_path / "values", tmp_path / "grads")
    with pytest.raises(FileNotFoundError):
        load_calibration_dirs(tmp_path / "nothing", tmp_path / "values")
