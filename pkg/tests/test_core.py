import json
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmk3d.core import (
    TABLE1_GROUPS,
    LandmarkSet,
    Volume3,
    decode_volume,
    encode_volume,
    in_bounds,
    linear_index,
    mm_to_voxel,
    read_landmarks,
    read_volume,
    table1_subanatomy,
    voxel_to_mm,
    write_landmarks,
    write_volume,
)
from lmk3d.errors import BadMagic, DuplicateId, InvalidVolume, NonPositiveDims, OutOfBounds, ParseError, TruncatedFile


def test_roundtrip_small_volume(tmp_path):
    v = Volume3(np.ones((2, 2, 2)), (1.0, 2.0, 3.0))
    p = tmp_path / "v.vlm"
    write_volume(v, p)
    back = read_volume(p)
    assert back.dims == (2, 2, 2)
    assert back.spacing == v.spacing
    assert np.array_equal(back.data, v.data)


def test_bad_magic(tmp_path):
    v = Volume3(np.ones((2, 2, 2)))
    buf = bytearray(encode_volume(v))
    buf[:4] = b"XXXX"
    p = tmp_path / "bad.vlm"
    p.write_bytes(bytes(buf))
    with pytest.raises(BadMagic):
        read_volume(p)


def test_truncated_and_zero_dims():
    buf = encode_volume(Volume3(np.ones((2, 2, 2))))
    with pytest.raises(TruncatedFile):
        decode_volume(buf[:-4])
    with pytest.raises(TruncatedFile):
        decode_volume(buf[:10])
    hdr = struct.pack("<4sI3I3f", b"VLM1", 1, 0, 2, 2, 1.0, 1.0, 1.0)
    with pytest.raises(NonPositiveDims):
        decode_volume(hdr)


def test_axis2_fastest(tmp_path):
    data = np.zeros((3, 3, 3))
    data[0, 0, 1] = 5.0
    p = tmp_path / "v.vlm"
    write_volume(Volume3(data), p)
    raw = p.read_bytes()[32:]
    flat = np.frombuffer(raw, dtype="<f4")
    assert flat[1] == 5.0
    assert linear_index((0, 0, 1), (3, 3, 3)) == 1
    assert linear_index((2, 1, 0), (3, 4, 5)) == 2 * 4 * 5 + 1 * 5


def test_file_size_and_determinism(tmp_path):
    v = Volume3(np.arange(8.0).reshape(2, 2, 2))
    a, b = tmp_path / "a.vlm", tmp_path / "b.vlm"
    write_volume(v, a)
    write_volume(v, b)
    assert os.path.getsize(a) == 4 + 4 + 12 + 12 + 8 * 4
    assert a.read_bytes() == b.read_bytes()


def test_nan_rejected(tmp_path):
    data = np.zeros((2, 2, 2))
    data[1, 1, 1] = np.nan
    with pytest.raises(InvalidVolume):
        Volume3(data)
    with pytest.raises(InvalidVolume):
        Volume3(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))


def test_volume_is_read_only():
    v = Volume3(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_read_landmarks_examples(tmp_path):
    p = tmp_path / "l.json"
    p.write_text(json.dumps({"landmarks": [{"id": 1, "p": [3.0, 5.0, 7.0]}]}))
    lms = read_landmarks(p, (10, 10, 10))
    assert lms.ids == (1,)
    assert np.array_equal(lms.points, [[3.0, 5.0, 7.0]])

    p.write_text(json.dumps({"landmarks": [{"id": 4, "p": [1, 1, 1]}, {"id": 4, "p": [2, 2, 2]}]}))
    with pytest.raises(DuplicateId):
        read_landmarks(p, (10, 10, 10))

    p.write_text(json.dumps({"landmarks": [{"id": 1, "p": [12, 0, 0]}]}))
    with pytest.raises(OutOfBounds):
        read_landmarks(p, (10, 10, 10))

    # flagged points may sit anywhere
    p.write_text(json.dumps({"landmarks": [{"id": 1, "p": [12, 0, 0], "oob": True}]}))
    assert read_landmarks(p, (10, 10, 10)).oob == (True,)

    p.write_text("{not json")
    with pytest.raises(ParseError):
        read_landmarks(p)
    p.write_text(json.dumps({"landmarks": [{"id": 1, "p": [1, 2]}]}))
    with pytest.raises(ParseError):
        read_landmarks(p)


def test_landmarks_sorted_and_roundtrip(tmp_path):
    lms = LandmarkSet((3, 1, 2), [[3, 3, 3], [1, 1, 1], [2, 2, 2]], (False, True, False), {1: "a", 3: "b"})
    assert lms.ids == (1, 2, 3)
    assert np.array_equal(lms.points[:, 0], [1, 2, 3])
    assert lms.oob == (True, False, False)
    p = tmp_path / "l.json"
    write_landmarks(lms, p, (5, 5, 5))
    assert read_landmarks(p) == lms


def test_mm_conversion_hand_values():
    assert np.allclose(voxel_to_mm((3, 0, 2), (2.2, 1.0, 0.5)), (6.6, 0.0, 1.0))
    assert np.allclose(mm_to_voxel((6.6, 0.0, 1.0), (2.2, 1.0, 0.5)), (3, 0, 2))
    assert in_bounds((0, 0, 0), (1, 1, 1))
    assert not in_bounds((-0.1, 0, 0), (4, 4, 4))
    assert not in_bounds((3.01, 0, 0), (4, 4, 4))


def test_table1_groups():
    groups = table1_subanatomy(range(1, 89))
    counts = {}
    for g in groups.values():
        counts[g] = counts.get(g, 0) + 1
    assert counts == {
        "Frontal Lobe": 5,
        "Brain Stem": 8,
        "Brain Boundary MSP": 11,
        "Corpus Callosum": 13,
        "Eye": 8,
        "Brain Axial Boundary": 10,
        "Temporal Lobe": 33,
    }
    assert len(TABLE1_GROUPS) == 7
    assert groups[5] == "Frontal Lobe" and groups[6] == "Brain Stem" and groups[88] == "Temporal Lobe"


@settings(max_examples=40, deadline=None)
@given(
    dims=st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
    spacing=st.tuples(*[st.floats(0.1, 5.0, allow_nan=False)] * 3),
    seed=st.integers(0, 2**32 - 1),
)
def test_volume_roundtrip_property(dims, spacing, seed):
    data = np.random.default_rng(seed).standard_normal(dims).astype(np.float32)
    v = Volume3(data, spacing)
    back = decode_volume(encode_volume(v))
    assert back == v
    assert back.data.tobytes() == v.data.tobytes()


@given(st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)), st.data())
def test_linear_index_matches_numpy(dims, data):
    idx = tuple(data.draw(st.integers(0, d - 1)) for d in dims)
    assert linear_index(idx, dims) == np.ravel_multi_index(idx, dims)
