import numpy as np
import pytest
from PIL import Image

from nearcps import io
from nearcps.core import LightRig, ScalarMap, VectorMap


def test_pfm_round_trip_three_channel(tmp_path, rng):
    a = rng.random((5, 7, 3)).astype(np.float32)
    io.write_pfm(tmp_path / "a.pfm", a)
    np.testing.assert_array_equal(io.read_pfm(tmp_path / "a.pfm"), a)


def test_pfm_round_trip_single_channel_and_orientation(tmp_path):
    a = np.arange(12, dtype=np.float32).reshape(3, 4)
    io.write_pfm(tmp_path / "b.pfm", a)
    b = io.read_pfm(tmp_path / "b.pfm")
    assert b[0, 0] == 0 and b[2, 3] == 11
    # rows are stored bottom to top
    raw = (tmp_path / "b.pfm").read_bytes()
    body = np.frombuffer(raw[-48:], "<f4")
    assert body[0] == 8


def test_pfm_rejects_garbage(tmp_path):
    (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ValueError):
        io.read_pfm(tmp_path / "x.pfm")


def test_vector_map_mask_survives_as_nan(tmp_path):
    data = np.ones((3, 3, 3))
    mask = np.eye(3, dtype=bool)
    io.save_vector_map(tmp_path / "v.pfm", VectorMap(data, mask))
    back = io.load_vector_map(tmp_path / "v.pfm")
    np.testing.assert_array_equal(back.mask, mask)
    assert np.all(back.data[~mask] == 0)


def test_scalar_map_round_trip(tmp_path):
    m = ScalarMap(np.arange(6.0).reshape(2, 3), np.array([[1, 0, 1], [1, 1, 0]], bool))
    io.save_scalar_map(tmp_path / "s.pfm", m)
    back = io.load_scalar_map(tmp_path / "s.pfm")
    np.testing.assert_array_equal(back.mask, m.mask)
    np.testing.assert_array_equal(back.values(), m.values())


def test_png_8_and_16_bit_with_gamma(tmp_path):
    a8 = np.full((2, 2, 3), 255, np.uint8)
    a8[0, 0] = 0
    Image.fromarray(a8).save(tmp_path / "a.png")
    x = io.read_png(tmp_path / "a.png")
    assert x.max() == 1.0 and x[0, 0, 0] == 0.0
    a16 = np.full((2, 2), 32768, np.uint16)
    Image.fromarray(a16).save(tmp_path / "b.png")
    y = io.read_png(tmp_path / "b.png", gamma=2.2)
    np.testing.assert_allclose(y, (32768 / 65535) ** 2.2)


def test_mask_png_round_trip(tmp_path):
    mask = np.zeros((4, 5), bool)
    mask[1:3, 2:] = True
    io.write_mask_png(tmp_path / "m.png", mask)
    np.testing.assert_array_equal(io.read_mask_png(tmp_path / "m.png"), mask)


def test_rig_json(tmp_path):
    rig = LightRig.from_positions([[1, 2, 3], [4, 5, 6], [7, 8, 9.5]])
    io.save_rig(tmp_path / "r.json", rig, note="x")
    np.testing.assert_array_equal(io.load_rig(tmp_path / "r.json").positions, rig.positions)
    assert io.read_json(tmp_path / "r.json")["note"] == "x"
