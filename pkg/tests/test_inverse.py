import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polaris import inverse
from polaris.fresnel import ComplexIor
from polaris.inverse import (AdamConfig, FreeParams, Observations, ObservedView, OptimizationDiverged,
                             adam_optimize, grad_fd, image_loss, joint_loss, landscape_scan, observe,
                             parse_free, recover_materials, with_geometry)
from polaris.pbrdf import MaterialParams
from polaris.renderer import env_scaled, orbit_cameras
from polaris.scene import parse_scene


@pytest.fixture(scope="module")
def small(sphere_doc_factory):
    doc = sphere_doc_factory(width=20, height=20, samples=32)
    doc["primitives"] = doc["primitives"][:1]
    doc["materials"] = doc["materials"][:1]
    scene = parse_scene(json.dumps(doc))
    cams = orbit_cameras(scene.camera, 2)
    return scene, cams, observe(scene, cams)


@pytest.fixture(scope="module")
def small_dielectric(sphere_doc_factory):
    doc = sphere_doc_factory({"m": 1, "roughness": 0.25, "ks": 0.6, "albedo": [0.7, 0.45, 0.2]},
                             width=20, height=20, samples=32)
    doc["primitives"] = doc["primitives"][:1]
    doc["materials"] = doc["materials"][:1]
    scene = parse_scene(json.dumps(doc))
    cams = orbit_cameras(scene.camera, 2)
    return scene, cams, observe(scene, cams)


CONDUCTOR = MaterialParams(0, roughness=0.2, ks=1.0, ior=ComplexIor((0.2, 0.5, 1.4), (3.4, 2.6, 1.9)))
DIELECTRIC = MaterialParams(1, albedo=(0.7, 0.45, 0.2), roughness=0.25, ks=0.6)


def test_free_params_layout():
    free = FreeParams({0: ["roughness", "eta", "k", "ks"], 1: ["albedo"]})
    assert free.labels == ["mat0.roughness", "mat0.eta[0]", "mat0.eta[1]", "mat0.eta[2]", "mat0.k[0]",
                           "mat0.k[1]", "mat0.k[2]", "mat0.ks", "mat1.albedo[0]", "mat1.albedo[1]",
                           "mat1.albedo[2]"]
    x = free.pack([CONDUCTOR, DIELECTRIC])
    assert x[0] == pytest.approx(math.log(0.2)) and x[8] == pytest.approx(math.log(0.7 / 0.3))
    with pytest.raises(ValueError):
        FreeParams({0: ["m"]})
    with pytest.raises(ValueError):
        FreeParams({0: ["roughness", "roughness"]})
    with pytest.raises(ValueError, match="fixed"):
        FreeParams({0: ["eta"]}).check([DIELECTRIC])
    with pytest.raises(ValueError):
        FreeParams({3: ["ks"]}).check([DIELECTRIC])


def test_parse_free():
    mats = [CONDUCTOR, DIELECTRIC]
    free = parse_free("roughness,eta,k,albedo", mats)
    assert [s.label for s in free.slots if s.material == 1] == ["mat1.roughness", "mat1.albedo[0]",
                                                                 "mat1.albedo[1]", "mat1.albedo[2]"]
    assert "mat0.albedo[0]" not in free.labels and "mat0.k[2]" in free.labels
    free = parse_free("0:ks;1:roughness,albedo", mats)
    assert free.labels == ["mat0.ks", "mat1.roughness", "mat1.albedo[0]", "mat1.albedo[1]", "mat1.albedo[2]"]


positive = st.floats(1e-3, 50.0)


@given(st.floats(1e-3, 1.0), positive, st.tuples(positive, positive, positive),
       st.tuples(st.floats(0, 20), st.floats(0, 20), st.floats(0, 20)),
       st.tuples(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6)))
def test_pack_unpack_round_trip(r, ks, eta, k, albedo):
    mats = [MaterialParams(0, roughness=r, ks=ks, ior=ComplexIor(eta, k)),
            MaterialParams(1, roughness=r, albedo=albedo)]
    free = FreeParams({0: ["roughness", "ks", "eta"], 1: ["albedo", "roughness"]})
    if min(k) > 0:
        free = FreeParams({0: ["roughness", "ks", "eta", "k"], 1: ["albedo", "roughness"]})
    back = free.unpack(free.pack(mats), mats)
    for a, b in zip(back, mats):
        assert a.roughness == pytest.approx(b.roughness, rel=1e-12)
        assert a.ks == pytest.approx(b.ks, rel=1e-12)
        np.testing.assert_allclose(a.albedo, b.albedo, rtol=0, atol=1e-12)
        np.testing.assert_allclose(a.ior.eta, b.ior.eta, rtol=1e-12)
        np.testing.assert_allclose(a.ior.k, b.ior.k, rtol=1e-12)


def test_roughness_clipped_on_unpack():
    free = FreeParams({0: ["roughness"]})
    assert free.unpack(np.array([0.5]), [CONDUCTOR])[0].roughness == 1.0


def test_initial_values():
    free = FreeParams({0: ["roughness", "ks", "eta", "k"], 1: ["albedo"]})
    a, b = free.initial([CONDUCTOR, DIELECTRIC])
    assert (a.roughness, a.ks, a.ior.eta, a.ior.k) == (0.3, 0.5, (1.0,) * 3, (1.0,) * 3)
    assert b.albedo == pytest.approx((0.5, 0.5, 0.5)) and b.roughness == DIELECTRIC.roughness


def test_joint_loss_at_truth(small):
    scene, _, obs = small
    assert joint_loss(scene, obs) < 1e-9


def test_joint_loss_linearity(small):
    _, _, obs = small
    obs0 = Observations(obs.views, lambda_s=1.7, lambda_dolp=0.0)
    doubled = [2 * v.stokes for v in obs.views]
    masked = np.concatenate([np.abs(v.stokes[v.mask]).ravel() for v in obs.views])
    assert image_loss(doubled, obs0) == pytest.approx(1.7 * masked.mean(), rel=1e-12)


def test_joint_loss_grows_off_truth(small):
    scene, _, obs = small
    bumped = scene.replace(materials=(scene.materials[0].with_(roughness=scene.materials[0].roughness + 0.1),))
    assert joint_loss(bumped, obs) > joint_loss(scene, obs) + 1e-4


def test_loss_kinds_and_errors(small):
    _, _, obs = small
    images = [v.stokes for v in obs.views]
    for kind in ("joint", "stokes_l1", "intensity_l1", "dolp_l1"):
        assert image_loss(images, obs, kind) == 0.0
    empty = Observations([ObservedView(v.camera, v.stokes, np.zeros_like(v.mask)) for v in obs.views])
    with pytest.raises(ValueError, match="empty"):
        image_loss(images, empty)
    with pytest.raises(ValueError):
        image_loss(images[:1], obs)
    with pytest.raises(ValueError):
        Observations([])
    with pytest.raises(ValueError):
        Observations([ObservedView(obs.views[0].camera, obs.views[0].stokes, obs.views[0].mask.astype(int))])


def test_quantized_observations(small):
    _, _, obs = small
    q = Observations([ObservedView(v.camera, v.stokes.astype(np.float32).astype(np.float64), v.mask)
                      for v in obs.views], quantize=True)
    images = [v.stokes for v in obs.views]
    assert image_loss(images, q) == 0.0
    q.quantize = False
    assert 0 < image_loss(images, q) < 1e-7


def test_grad_fd_examples():
    np.testing.assert_allclose(grad_fd(lambda x: float(np.sum(x ** 2)), [1.0, 2.0]), [2, 4], atol=1e-6)
    assert not grad_fd(lambda x: 3.0, np.zeros(4)).any()
    with pytest.raises(FloatingPointError, match="coordinate 1"):
        grad_fd(lambda x: math.inf if x[1] > 0.5 else 0.0, [0.0, 0.5])
    with pytest.raises(ValueError):
        grad_fd(lambda x: 0.0, [0.0], h=0.0)


def test_grad_fd_stencils_agree(small):
    scene, _, obs = small
    free = FreeParams({0: ["roughness", "ks", "eta", "k"]})
    start = free.initial(scene.materials)
    objective = inverse.MaterialObjective(scene.replace(materials=start), obs, free)
    x = free.pack(start)
    h = 1e-3
    g = grad_fd(objective, x, h)
    g_half = grad_fd(objective, x, h / 2)
    # 4-point central stencil: (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h
    g4 = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g4[i] = (-objective(x + 2 * e) + 8 * objective(x + e) - 8 * objective(x - e) + objective(x - 2 * e)) / (12 * h)
    np.testing.assert_allclose(g, g_half, rtol=0.05)
    np.testing.assert_allclose(g, g4, rtol=0.05)


def test_adam_examples():
    res = adam_optimize(lambda x: float((x[0] - 3) ** 2), [0.0], AdamConfig(lr=0.1, iters=500))
    assert abs(res.x[0] - 3) < 1e-3
    res = adam_optimize(lambda x: 1.0, [0.3, -2.0], AdamConfig(iters=20))
    np.testing.assert_array_equal(res.x, [0.3, -2.0])
    res = adam_optimize(lambda x: float(x[0] ** 2), [0.0], AdamConfig(iters=20))
    assert res.iterations == 0 and res.trace == [(0, 0.0)]
    with pytest.raises(ValueError):
        adam_optimize(lambda x: 0.0, [0.0], AdamConfig(iters=0))


def test_adam_returns_best_and_is_deterministic():
    f = lambda x: float(np.sum((x - np.array([1.0, -2.0])) ** 2) + 0.3 * abs(x[0]))  # noqa: E731
    a = adam_optimize(f, [0.0, 0.0], AdamConfig(lr=0.2, iters=80))
    b = adam_optimize(f, [0.0, 0.0], AdamConfig(lr=0.2, iters=80))
    assert a.x.tobytes() == b.x.tobytes() and a.trace == b.trace
    assert a.loss == min(v for _, v in a.trace)
    assert f(a.x) == a.loss


def test_adam_divergence_keeps_trace():
    calls = []

    def f(x):
        calls.append(1)
        return 1.0 if len(calls) < 30 else math.nan

    with pytest.raises(OptimizationDiverged) as info:
        adam_optimize(f, [0.0], AdamConfig(iters=50), grad_fn=lambda x: np.ones(1))
    assert len(info.value.trace) == 30 and math.isnan(info.value.trace[-1][1])


def test_lr_schedule():
    cfg = AdamConfig(lr=0.05, lr_final=0.002, iters=101)
    assert cfg.lr_at(0) == pytest.approx(0.05) and cfg.lr_at(100) == pytest.approx(0.002)
    assert cfg.lr_at(50) == pytest.approx(0.026)
    assert AdamConfig(lr=0.05).lr_at(77) == 0.05


def test_recover_from_truth_takes_no_steps(small):
    scene, _, obs = small
    free = FreeParams({0: ["roughness", "ks", "eta", "k"]})
    res = recover_materials(scene, obs, free, AdamConfig(iters=50), gt=scene.materials, init=False)
    assert res.iterations == 0 and res.loss < 1e-9
    assert all(err == 0 for *_, err in res.report)


def test_small_dielectric_recovery(small_dielectric):
    scene, _, obs = small_dielectric
    free = FreeParams({0: ["roughness", "albedo"]})
    res = recover_materials(scene, obs, free, AdamConfig(iters=150, lr_final=0.002), gt=scene.materials)
    for label, gt, got, err in res.report:
        assert err < 0.01, label
    assert res.trace[0][1] > 100 * res.loss


def test_with_geometry(small):
    scene, _, _ = small
    assert with_geometry(scene, "sphere_radius", 1.2).primitives[0].radius == 1.2
    assert with_geometry(scene, "sphere_center_axis", 0.3, axis=1).primitives[0].center == (0.0, 0.3, 0.0)
    with pytest.raises(ValueError):
        with_geometry(scene, "box_size", 1.0)


@pytest.mark.parametrize("kind", ["stokes_l1", "intensity_l1", "dolp_l1"])
def test_landscape_zero_at_truth(small, kind):
    scene, _, obs = small
    rows = landscape_scan(scene, obs, "sphere_radius", (0.9, 1.1, 5), kind)
    assert [r[0] for r in rows] == [0.9, 0.95, 1.0, 1.05, 1.1]
    assert rows[2][1] < 1e-9 and all(r[1] > 1e-6 for i, r in enumerate(rows) if i != 2)


def test_landscape_dolp_invariant_to_env_scale(small):
    scene, cams, obs = small
    base = landscape_scan(scene, obs, "sphere_radius", (0.9, 1.1, 5), "dolp_l1")
    bright = env_scaled(scene, 10.0)
    rows = landscape_scan(bright, observe(bright, cams), "sphere_radius", (0.9, 1.1, 5), "dolp_l1")
    np.testing.assert_allclose([r[1] for r in rows], [r[1] for r in base], rtol=0, atol=1e-6)
    with pytest.raises(ValueError):
        landscape_scan(scene, obs, "sphere_radius", (1.1, 0.9, 5), "dolp_l1")
    with pytest.raises(ValueError):
        landscape_scan(scene, obs, "sphere_radius", (0.9, 1.1, 2), "dolp_l1")
    with pytest.raises(ValueError):
        landscape_scan(scene, obs, "sphere_radius", (0.9, 1.1, 5), "joint")
