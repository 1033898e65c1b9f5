import numpy as np
import pytest

from nearcps import io, synth
from nearcps.core import LightRig, LightSource, VectorMap

RAW = synth.RenderConfig(scale_to_max=False)


def one_pixel(n, p=(0.0, 0.0, 0.0)):
    mask = np.ones((1, 1), bool)
    return VectorMap(np.array(n, float).reshape(1, 1, 3), mask), VectorMap(np.array(p, float).reshape(1, 1, 3), mask)


def overhead_rig(mu=0.0, axis=(0.0, 0.0, 1.0)):
    axis = np.asarray(axis, float)
    return LightRig((LightSource(np.array([0, 0, 2.0]), axis, mu), LightSource(np.array([0, 0, 2.0]), axis, mu),
                     LightSource(np.array([0, 0, 2.0]), axis, mu)))


def white(mask):
    return synth.uniform_albedo(mask, (1.0, 1.0, 1.0))


def test_render_inverse_square_example():
    n, p = one_pixel((0, 0, 1))
    c = synth.render(n, p, white(n.mask), overhead_rig(), RAW)
    np.testing.assert_allclose(c.data[0, 0], 0.25)


def test_render_attached_shadow():
    n, p = one_pixel((0, 0, -1))
    c = synth.render(n, p, white(n.mask), overhead_rig(), RAW)
    np.testing.assert_array_equal(c.data[0, 0], 0.0)


def test_anisotropy_aligned_axis_is_isotropic():
    n, p = one_pixel((0.3, 0.1, 0.9486832980505138))
    a = synth.render(n, p, white(n.mask), overhead_rig(0.0), RAW)
    b = synth.render(n, p, white(n.mask), overhead_rig(20.0), RAW)
    np.testing.assert_allclose(a.data, b.data, rtol=1e-14)


def test_anisotropy_off_axis_dims():
    n, p = one_pixel((0, 0, 1))
    tilt = np.array([np.sin(0.3), 0, np.cos(0.3)])
    c = synth.render(n, p, white(n.mask), overhead_rig(10.0, tilt), RAW)
    np.testing.assert_allclose(c.data[0, 0], 0.25 * np.cos(0.3) ** 10)


def test_render_rejects_non_unit_normals():
    n, p = one_pixel((0, 0, 1.5))
    with pytest.raises(ValueError, match="row=0, col=0"):
        synth.render(n, p, white(n.mask), overhead_rig())


def test_scaling_and_noise_are_seeded():
    geo = synth.sphere_cap(16)
    rig = synth.ring_rig(geo.center, geo.vertical_span, 2.0, 65.0)
    alb = synth.uniform_albedo(geo.mask)
    clean = synth.render(geo.normals, geo.positions, alb, rig)
    assert clean.values().max() == pytest.approx(1.0)
    cfg = synth.RenderConfig(noise_sigma=2 / 255, seed=4)
    a = synth.render(geo.normals, geo.positions, alb, rig, cfg)
    b = synth.render(geo.normals, geo.positions, alb, rig, cfg)
    np.testing.assert_array_equal(a.data, b.data)
    assert a.values().min() >= 0 and a.values().max() <= 1
    assert np.std(a.values() - clean.values()) == pytest.approx(2 / 255, rel=0.2)


def test_crosstalk_identity_matches_render():
    geo = synth.sphere_cap(16)
    rig = synth.ring_rig(geo.center, geo.vertical_span, 2.0, 65.0)
    alb = synth.two_albedo(geo.mask, blob_sigma=2.0)
    model = synth.CrosstalkModel(np.eye(3), np.eye(3), alb)
    np.testing.assert_allclose(synth.apply_crosstalk(geo.normals, geo.positions, rig, model).data,
                               synth.render(geo.normals, geo.positions, alb, rig).data, rtol=1e-13)


def test_crosstalk_single_pixel_by_hand():
    n, p = one_pixel((0, 0, 1))
    rig = LightRig((LightSource(np.array([0, 0, 1.0])), LightSource(np.array([5, 0, 1.0])),
                    LightSource(np.array([0, 5, 1.0]))))
    r = white(n.mask)
    S = np.full((3, 3), 0.1) + 0.9 * np.eye(3)
    c = synth.apply_crosstalk(n, p, rig, synth.CrosstalkModel(S, np.eye(3), r), RAW).data[0, 0]
    s = np.array([1.0, 1 / 26**1.5, 1 / 26**1.5])
    np.testing.assert_allclose(c, S @ s, rtol=1e-13)


def test_crosstalk_makes_apparent_albedo_vary():
    geo = synth.sphere_cap(24)
    rig = synth.ring_rig(geo.center, geo.vertical_span, 2.0, 65.0)
    r = synth.uniform_albedo(geo.mask)
    model = synth.CrosstalkModel.uniform(0.2, 0.2, r)
    c = synth.apply_crosstalk(geo.normals, geo.positions, rig, model, RAW).values()
    s = synth.light_shading(geo.normals, geo.positions, rig)
    lit = np.all(s > 1e-3, axis=1)
    apparent = c[lit] / s[lit]
    chroma = apparent / np.linalg.norm(apparent, axis=1, keepdims=True)
    assert np.ptp(chroma, axis=0).max() > 1e-2
    diag = synth.render(geo.normals, geo.positions, r, rig, RAW).values()
    assert not np.allclose(c, diag)


def test_crosstalk_model_invariants():
    r = synth.uniform_albedo(np.ones((2, 2), bool))
    with pytest.raises(ValueError):
        synth.CrosstalkModel(np.full((3, 3), 0.5), np.eye(3), r)
    with pytest.raises(ValueError):
        synth.CrosstalkModel(np.eye(3) - 0.1 * (1 - np.eye(3)), np.eye(3), r)
    assert np.all(synth.CrosstalkModel.uniform(0.2, 0.1, r).albedo_matrices() >= 0)


@pytest.mark.parametrize("kind, n", [("distance", 20), ("elevation", 12), ("anisotropy", 3)])
def test_standard_sweeps(kind, n):
    specs = synth.sweep_specs(synth.SceneSpec(), kind, synth.STANDARD_SWEEPS[kind])
    assert len(specs) == n
    if kind == "distance":
        assert specs[0].distance == 0.5 and specs[-1].distance == 10.0
        assert all(s.elevation == 65.0 for s in specs)
    if kind == "elevation":
        assert specs[0].elevation == 85.0 and specs[-1].elevation == 30.0


def test_empty_sweep_rejected():
    with pytest.raises(ValueError):
        synth.sweep_specs(synth.SceneSpec(), "distance", [])


def test_ring_rig_geometry():
    rig = synth.ring_rig(np.zeros(3), 2.0, 3.0, 65.0)
    d = np.linalg.norm(rig.positions, axis=1)
    np.testing.assert_allclose(d, 6.0)
    np.testing.assert_allclose(np.degrees(np.arcsin(rig.positions[:, 2] / d)), 65.0)
    az = np.degrees(np.arctan2(rig.positions[:, 1], rig.positions[:, 0])) % 360
    np.testing.assert_allclose(np.diff(np.sort(az)), 120.0)


def test_geometry_is_consistent():
    geo = synth.bumpy_hemisphere(48)
    geo.normals.check_unit()
    # normals match finite differences of the height field in the interior
    z = geo.depth.data
    h = geo.pixel_pitch
    zx = (z[24, 25] - z[24, 23]) / (2 * h)
    n = geo.normals.data[24, 24]
    assert -n[0] / n[2] == pytest.approx(zx, abs=0.05)


def test_perturb_normals_rms():
    geo = synth.sphere_cap(64)
    p = synth.perturb_normals(geo.normals, 5.0)
    p.check_unit()
    ang = np.degrees(np.arccos(np.clip(np.sum(p.values() * geo.normals.values(), axis=1), -1, 1)))
    assert np.sqrt(np.mean(ang**2)) == pytest.approx(5.0, rel=0.02)


def test_two_albedo_fraction():
    mask = np.ones((40, 40), bool)
    alb = synth.two_albedo(mask, fraction=0.2)
    minority = np.all(np.isclose(alb.values(), synth.LIP_ALBEDO), axis=1)
    assert minority.mean() == pytest.approx(0.2, abs=0.01)


def test_write_scene_and_sweep(tmp_path):
    m = synth.synth_sweep(tmp_path, synth.SceneSpec(size=16), "distance", [1.0, 2.0])
    assert len(m["cases"]) == 2
    case = tmp_path / m["cases"][1]["dir"]
    rig = io.load_rig(case / "gt_rig.json")
    assert m["cases"][1]["sweep_value"] == 2.0
    img = io.load_image(case / "image.pfm")
    assert img.mask.sum() > 0
    np.testing.assert_array_equal(rig.positions[0], m["cases"][1]["rig"]["lights"][0]["position"])
    assert io.read_json(tmp_path / "manifest.json")["sweep"] == "distance"
