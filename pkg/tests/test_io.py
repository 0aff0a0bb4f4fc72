import json
import struct

import numpy as np
import pytest

from octmoco import io
from octmoco.core import Volume, VolumeGeometry
from octmoco.errors import DataError


def test_volume_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    v = Volume(rng.random((5, 4, 3), dtype=np.float32), VolumeGeometry(1.9, 5.8, 5.8))
    path = tmp_path / "v.omv"
    io.write_volume(path, v)
    back = io.read_volume(path)
    np.testing.assert_array_equal(back.data, v.data)
    assert back.geometry == v.geometry


def test_container_layout_matches_documented_index(tmp_path):
    # the scalar at (z, x, y) must live at payload offset 4*((y*W + x)*H + z)
    h, w, n = 3, 4, 2
    a = np.arange(h * w * n, dtype=np.float32).reshape(h, w, n) / 100.0
    path = tmp_path / "layout.omv"
    io.write_omv(path, a)
    raw = path.read_bytes()
    assert raw[:4] == b"OMV1"
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen])
    assert header["dtype"] == "f32"
    assert header["dims"] == [h, w, n]
    assert header["order"] == "z-contiguous"
    assert len(header["geometry_mm"]) == 3
    payload = raw[8 + hlen :]
    for z in range(h):
        for x in range(w):
            for y in range(n):
                off = 4 * ((y * w + x) * h + z)
                (val,) = struct.unpack("<f", payload[off : off + 4])
                assert val == a[z, x, y]


def test_map_and_vector_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    m = rng.standard_normal((6, 5)).astype(np.float32)
    vec = rng.standard_normal(7).astype(np.float32)
    io.write_omv(tmp_path / "m.omv", m)
    io.write_omv(tmp_path / "v.omv", vec)
    np.testing.assert_array_equal(io.read_omv(tmp_path / "m.omv")[0], m)
    np.testing.assert_array_equal(io.read_omv(tmp_path / "v.omv")[0], vec)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.omv"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError):
        io.read_omv(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.omv"
    io.write_omv(path, np.zeros((4, 4), np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(DataError):
        io.read_omv(path)


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        io.read_omv(tmp_path / "absent.omv")
