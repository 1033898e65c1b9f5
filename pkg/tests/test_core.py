import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nearcps.core import (DegenerateGeometryError, LightRig, LightSource, ScalarMap, VectorMap, angle_between,
                          normalize_map, shading_matrices, shading_matrix)

coord = st.floats(-5, 5, allow_nan=False)
vec3 = st.tuples(coord, coord, coord).map(np.array)


def rig_at(*positions):
    return LightRig.from_positions(positions)


@pytest.mark.parametrize("p, v, row", [
    ((0, 0, 2), (0, 0, 0), (0, 0, 0.25)),
    ((0, 0, 1), (0, 0, 0), (0, 0, 1)),
    ((3, 0, 0), (1, 0, 0), (0.25, 0, 0)),
])
def test_shading_row_examples(p, v, row):
    L = shading_matrix(rig_at(p, (5, 5, 5), (-5, 5, 5)), v)
    np.testing.assert_allclose(L[0], row, atol=1e-15)


def test_coincident_light_raises():
    with pytest.raises(DegenerateGeometryError):
        shading_matrix(rig_at((0, 0, 0), (1, 0, 0), (0, 1, 0)), (0, 0, 0))


@given(vec3, vec3)
def test_inverse_square_and_direction(p, v):
    d = p - v
    if np.linalg.norm(d) < 1e-2:
        return
    lp = np.stack([p, p + 10, p - 10])
    row = shading_matrices(lp, v)[0]
    far = shading_matrices(np.stack([v + 2 * d, p + 10, p - 10]), v)[0]
    np.testing.assert_allclose(np.linalg.norm(far), np.linalg.norm(row) / 4, rtol=1e-12)
    np.testing.assert_allclose(row / np.linalg.norm(row), d / np.linalg.norm(d), atol=1e-12)


def test_shading_matrices_broadcast_shape():
    L = shading_matrices(np.eye(3) * 3, np.zeros((4, 5, 3)))
    assert L.shape == (4, 5, 3, 3)


def test_normalize_map_examples():
    data = np.zeros((1, 3, 3))
    data[0, 0] = (0, 0, 2)
    data[0, 1] = (1, 1, 1)
    m, bad = normalize_map(VectorMap(data, np.array([[True, True, True]])))
    np.testing.assert_allclose(m.data[0, 0], (0, 0, 1))
    np.testing.assert_allclose(m.data[0, 1], np.ones(3) / np.sqrt(3))
    assert bad == 1 and not m.mask[0, 2]


def test_normalize_map_all_zero():
    m, bad = normalize_map(VectorMap(np.zeros((4, 4, 3)), np.ones((4, 4), bool)))
    assert bad == 16 and not m.mask.any()


def test_maps_are_immutable_and_validated():
    m = ScalarMap(np.zeros((2, 3)), np.ones((2, 3), bool))
    assert (m.height, m.width) == (2, 3)
    with pytest.raises(ValueError):
        m.data[0, 0] = 1.0
    with pytest.raises(ValueError):
        ScalarMap(np.zeros((2, 3)), np.ones((3, 2), bool))
    with pytest.raises(ValueError):
        VectorMap(np.zeros((2, 3, 2)), np.ones((2, 3), bool))


def test_check_unit_names_worst_pixel():
    data = np.zeros((2, 2, 3))
    data[..., 2] = 1.0
    data[1, 0] = (0, 0, 1.1)
    with pytest.raises(ValueError, match=r"row=1, col=0"):
        VectorMap(data, np.ones((2, 2), bool)).check_unit()


def test_light_source_invariants():
    with pytest.raises(ValueError):
        LightSource(np.zeros(3), np.array([0, 0, 2.0]))
    with pytest.raises(ValueError):
        LightSource(np.zeros(3), anisotropy=-1)
    with pytest.raises(ValueError):
        LightRig((LightSource(np.zeros(3)),) * 2)


def test_rig_dict_round_trip():
    rig = LightRig((LightSource(np.array([1.0, 2, 3])), LightSource(np.array([0.0, 1, 0]), np.array([0, 1.0, 0]), 10),
                    LightSource(np.array([-1.0, 0, 2]))))
    back = LightRig.from_dict(rig.to_dict())
    np.testing.assert_array_equal(back.positions, rig.positions)
    assert back.lights[1].anisotropy == 10
    assert rig.to_dict()["lights"][0]["channel"] == "red"


def test_angle_between():
    assert angle_between([1, 0, 0], [0, 1, 0]) == pytest.approx(90)
    assert angle_between([1, 0, 0], [1, 0, 0]) == pytest.approx(0)
