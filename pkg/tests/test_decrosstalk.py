import numpy as np
import pytest

from nearcps import decrosstalk as dx
from nearcps.core import VectorMap

K = np.array([[1.0, 0.12, 0.05], [0.08, 1.0, 0.15], [0.03, 0.1, 1.0]])


def test_pure_channels_identity():
    est = dx.estimate(dx.simulate_white_target(np.eye(3)))
    np.testing.assert_array_equal(est.matrix, np.eye(3))


def test_single_ratio_closed_form():
    mix = np.eye(3)
    mix[0, 1] = 0.1
    est = dx.estimate(dx.simulate_white_target(mix))
    want = np.eye(3)
    want[0, 1] = -0.1
    np.testing.assert_allclose(est.matrix, want, atol=1e-12)


def test_noiseless_round_trip():
    imgs = dx.simulate_white_target(K)
    est = dx.estimate(imgs)
    np.testing.assert_allclose(est.ratios, K, atol=1e-12)
    pure = dx.simulate_white_target(np.eye(3))
    for y in range(3):
        out, _ = dx.apply(est, imgs[y])
        assert np.max(np.abs(out.data - pure[y].data)) < 1e-6


def test_noisy_round_trip_and_idempotence():
    imgs = dx.simulate_white_target(K, noise_sigma=2 / 255, seed=4)
    est = dx.estimate(imgs)
    for y in range(3):
        out, _ = dx.apply(est, imgs[y])
        den = out.data[..., y]
        for x in range(3):
            if x != y:
                assert abs(np.median(out.data[..., x] / den)) < 1e-3


def test_apply_identity_zero_and_clamp():
    rng = np.random.default_rng(0)
    img = VectorMap(rng.uniform(size=(8, 8, 3)), np.ones((8, 8), bool))
    out, n = dx.apply(np.eye(3), img)
    np.testing.assert_array_equal(out.data, img.data)
    assert n == 0
    zero = VectorMap(np.zeros((8, 8, 3)), np.ones((8, 8), bool))
    out, _ = dx.apply(dx.estimate(dx.simulate_white_target(K)), zero)
    assert np.all(out.data == 0)
    neg = np.array([[1.0, -2.0, 0], [0, 1, 0], [0, 0, 1]])
    out, n = dx.apply(neg, VectorMap(np.full((2, 2, 3), 0.5), np.ones((2, 2), bool)))
    assert n == 4 and np.all(out.data >= 0)


def test_zero_denominators_skipped():
    imgs = dx.simulate_white_target(K)
    d = np.array(imgs[0].data)
    d[:5, :, 0] = 0.0
    est = dx.estimate([VectorMap(d, imgs[0].mask)] + imgs[1:])
    np.testing.assert_allclose(est.ratios, K, atol=1e-12)
    assert est.num_pixels[0] == imgs[0].mask.sum() - 5 * d.shape[1]


def test_errors():
    with pytest.raises(dx.DecrosstalkError):
        dx.estimate(dx.simulate_white_target(K)[:2])
    sing = np.ones((3, 3))
    with pytest.raises(dx.DecrosstalkError, match="singular"):
        dx.estimate(dx.simulate_white_target(sing))
    dark = dx.simulate_white_target(K)
    dark[1] = VectorMap(np.zeros_like(dark[1].data), dark[1].mask)
    with pytest.raises(dx.DecrosstalkError, match="green"):
        dx.estimate(dark)


def test_json_round_trip(tmp_path):
    est = dx.estimate(dx.simulate_white_target(K))
    est.save(tmp_path / "m.json")
    back = dx.Decrosstalk.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.matrix, est.matrix)
    np.testing.assert_array_equal(back.ratios, est.ratios)
    with pytest.raises(dx.DecrosstalkError):
        dx.Decrosstalk.from_dict({"matrix": [[1, 0], [0, 1]]})
