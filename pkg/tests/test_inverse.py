import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from flashsg import Camera, FlashLight, Primitive, RenderOptions, SvbrdfMaps, make_bank, render, tonemap_ldr, \
    trace_gbuffer
from flashsg.datagen import environment_pool
from flashsg.errors import ContractError, NumericalError
from flashsg.geometry import consistent_depth_range
from flashsg.inverse import (PARAM_CLASSES, CascadeFitter, Capture, FitConfig, FitParams, IlluminationEstimator,
                             JointRefiner, LossSpec, SvbrdfEstimator, Target, adam_fit, fit_illumination, fit_svbrdf,
                             grad_check, grad_render_loss, refine_joint)
from flashsg.inverse.gradcheck import random_problem
from flashsg.losses import loss_normal_angular
from flashsg.shading import MIN_ROUGHNESS
from flashsg.validation import normalize

# per-scene fits need a far larger step than the training-recipe default
SCENE_RATE = 1e-2


def sphere_scene(size=32, kd=0.5, ks=0.04, rough=0.5, bank=None):
    cam = Camera(size, size, 50.0)
    z, r = 2.0, 0.6
    near, far = consistent_depth_range(z, cam, span=(z - r, z + r))
    cam = Camera(size, size, 50.0, near=near, far=far)
    gb = trace_gbuffer([Primitive("sphere", [0, 0, -z], scale=[r] * 3)], cam)
    m = gb.mask[..., None]
    maps = SvbrdfMaps(np.full((size, size, 3), kd) * m, np.full((size, size, 3), ks) * m,
                      np.full((size, size), rough) * gb.mask)
    bank = bank or environment_pool()[0]
    flash = FlashLight(np.full(3, 0.6 * math.pi * (z - r) ** 2))
    fl = tonemap_ldr(render(gb, maps, bank, flash))
    nf = tonemap_ldr(render(gb, maps, bank, flash, RenderOptions.from_mode("env")))
    return cam, gb, maps, bank, flash, fl, nf


@pytest.fixture(scope="module")
def scene():
    return sphere_scene()


def masked_mse(a, b, mask):
    return float(np.mean((a - b)[mask] ** 2))


class TestGradients:
    @pytest.mark.parametrize("stage", ["illumination", "svbrdf", "joint"])
    def test_gradcheck_passes(self, stage):
        report = grad_check(stage, seed=3, samples=60)
        assert report.passed, report.to_text()
        assert set(report.max_rel_error) == set({"illumination": ("sg_amplitudes",),
                                                 "svbrdf": ("diffuse", "specular", "roughness"),
                                                 "joint": ("diffuse", "specular", "roughness",
                                                           "normals")}[stage])

    @pytest.mark.parametrize("cls", PARAM_CLASSES)
    def test_corrupted_gradient_is_caught(self, cls):
        assert not grad_check("all", seed=1, samples=20, corrupt=cls).passed

    def test_report_deterministic(self):
        a = grad_check("svbrdf", seed=4, samples=10)
        b = grad_check("svbrdf", seed=4, samples=10)
        assert a.to_text() == b.to_text()

    def test_unknown_stage(self):
        with pytest.raises(ContractError):
            grad_check("shape")

    def test_zero_residual_has_zero_gradient(self):
        problem, params, _ = random_problem(5)
        packed = problem.pack(params)
        full, _ = problem.shade(packed, "full")
        env, _ = problem.shade(packed, "env")
        h, w = problem.shape
        images = []
        for img in (full, env):
            out = np.zeros((h * w, 3))
            out[problem.idx] = img
            images.append(out.reshape(h, w, 3))
        spec = LossSpec([Target(images[0], "full"), Target(images[1], "env")])
        value, grads = grad_render_loss(problem, params, spec)
        assert value <= 1e-15
        norm = math.sqrt(sum(float(np.sum(getattr(grads, k) ** 2)) for k in PARAM_CLASSES))
        assert norm <= 1e-8

    def test_doubling_objective_doubles_gradient(self):
        problem, params, targets = random_problem(6)
        v1, g1 = grad_render_loss(problem, params, LossSpec(targets))
        v2, g2 = grad_render_loss(problem, params, LossSpec(targets + targets))
        assert v2 == pytest.approx(2 * v1, rel=1e-14)
        for k in PARAM_CLASSES:
            np.testing.assert_allclose(getattr(g2, k), 2 * getattr(g1, k), rtol=1e-12, atol=1e-300)

    def test_frozen_class_request_rejected(self):
        problem, params, targets = random_problem(7)
        spec = LossSpec(targets, active=("sg_amplitudes",))
        with pytest.raises(ContractError):
            grad_render_loss(problem, params, spec, classes=("diffuse",))

    def test_frozen_classes_get_zero_gradient(self):
        problem, params, targets = random_problem(7)
        _, g = grad_render_loss(problem, params, LossSpec(targets, active=("roughness",)))
        for k in PARAM_CLASSES:
            if k != "roughness":
                assert not np.any(getattr(g, k))
        assert np.any(g.roughness)

    def test_terms_referencing_frozen_classes_rejected(self):
        with pytest.raises(ContractError):
            LossSpec([], active=("diffuse",), consistency_weight=0.5)
        with pytest.raises(ContractError):
            LossSpec([], active=("normals",), smoothness_weight=0.01)


class Quadratic:
    """f = sum((amplitudes - centre)^2) as a FitParams objective."""

    def __init__(self, centre):
        self.centre = centre

    def __call__(self, p):
        d = p.sg_amplitudes - self.centre
        g = FitParams(2 * d, np.zeros_like(p.diffuse), np.zeros_like(p.specular), np.zeros_like(p.roughness),
                      np.zeros_like(p.normals))
        return float(np.sum(d * d)), g


def small_params(amp=0.5):
    n = np.zeros((2, 2, 3))
    n[..., 2] = 1
    return FitParams(np.full((1, 1), amp), np.full((2, 2, 3), 0.5), np.full((2, 2, 3), 0.5), np.full((2, 2), 0.5), n)


class TestAdam:
    def test_quadratic_converges(self):
        res = adam_fit(small_params(0.5), Quadratic(1.3), FitConfig("illumination", learning_rate=1e-2,
                                                                     iterations=2000), active=("sg_amplitudes",))
        assert abs(res.params.sg_amplitudes[0, 0] - 1.3) <= 1e-4

    def test_zero_iterations(self):
        p = small_params(0.7)
        res = adam_fit(p, Quadratic(1.3), FitConfig("illumination", iterations=0))
        for k in PARAM_CLASSES:
            np.testing.assert_array_equal(getattr(res.params, k), getattr(p, k))
        assert res.params is not p

    def test_deterministic(self):
        problem, params, targets = random_problem(8)
        spec = LossSpec(targets)
        cfg = FitConfig("joint", learning_rate=1e-2, iterations=40)
        a = adam_fit(params, lambda p: grad_render_loss(problem, p, spec), cfg)
        b = adam_fit(params, lambda p: grad_render_loss(problem, p, spec), cfg)
        for k in PARAM_CLASSES:
            np.testing.assert_array_equal(getattr(a.params, k), getattr(b.params, k))
        assert a.losses == b.losses

    def test_constraints_after_every_step(self):
        problem, params, targets = random_problem(9)
        spec = LossSpec(targets)
        seen = []

        def fn(p):
            seen.append(p.copy())
            return grad_render_loss(problem, p, spec)

        res = adam_fit(params, fn, FitConfig("joint", learning_rate=0.2, iterations=25))
        for p in seen[1:] + [res.params, res.final]:
            m = problem.mask
            assert p.sg_amplitudes.min() >= 0 and p.sg_amplitudes.max() <= 2
            assert p.diffuse.min() >= 0 and p.diffuse.max() <= 1
            assert p.specular.min() >= 0 and p.specular.max() <= 1
            assert p.roughness.min() >= MIN_ROUGHNESS and p.roughness.max() <= 1
            np.testing.assert_allclose(np.linalg.norm(p.normals[m], axis=-1), 1.0, atol=1e-12)

    def test_best_iterate_returned(self):
        problem, params, targets = random_problem(10)
        spec = LossSpec(targets)
        res = adam_fit(params, lambda p: grad_render_loss(problem, p, spec),
                       FitConfig("joint", learning_rate=0.3, iterations=30))
        assert res.best_loss == min(res.losses)
        assert grad_render_loss(problem, res.params, spec)[0] == pytest.approx(res.best_loss, rel=1e-12)
        assert np.all(np.diff(res.best_so_far) <= 0)
        assert res.best_loss <= res.losses[0]

    def test_non_finite_gradient_names_step_and_class(self):
        calls = []

        def fn(p):
            calls.append(1)
            loss, g = Quadratic(1.0)(p)
            if len(calls) == 4:
                g.sg_amplitudes[...] = np.nan
            return loss, g

        with pytest.raises(NumericalError, match="sg_amplitudes at step 3") as exc:
            adam_fit(small_params(), fn, FitConfig("illumination", iterations=10), active=("sg_amplitudes",))
        assert exc.value.step == 3 and exc.value.parameter == "sg_amplitudes"

    def test_non_finite_loss(self):
        with pytest.raises(NumericalError, match="loss"):
            adam_fit(small_params(), lambda p: (float("nan"), Quadratic(1.0)(p)[1]), FitConfig("illumination"))

    def test_schedule_halves(self):
        cfg = FitConfig("svbrdf", learning_rate=0.1, iterations=10)
        assert [cfg.rate(s) for s in range(10)] == [0.1] * 5 + [0.05] * 5

    @pytest.mark.parametrize("kwargs", [dict(stage="shape"), dict(learning_rate=0.0), dict(iterations=-1),
                                        dict(iterations=1.5), dict(smoothness_weight=-1.0)])
    def test_config_validation(self, kwargs):
        with pytest.raises(ContractError):
            FitConfig(**kwargs)

    def test_stage_defaults(self):
        assert [FitConfig(s).iterations for s in ("illumination", "svbrdf", "joint")] == [2000, 5000, 2000]
        cfg = FitConfig()
        assert cfg.learning_rate == 2e-4 and cfg.smoothness_weight == 0.01


class TestIllumination:
    def test_round_trip(self, scene):
        cam, gb, maps, bank, flash, fl, nf = scene
        got = fit_illumination(fl, nf, gb, albedo=maps, flash=flash,
                               config=FitConfig("illumination", learning_rate=SCENE_RATE, iterations=1000))
        assert np.mean(np.abs(got.amplitudes - bank.amplitudes)) <= 0.1

    def test_round_trip_specular_dominated(self):
        # dark metal: a diffuse-only start would overshoot into saturation and stall
        cam, gb, maps, bank, flash, fl, nf = sphere_scene(24, kd=0.06, ks=0.64, rough=0.4,
                                                          bank=environment_pool()[3])
        got = fit_illumination(fl, nf, gb, albedo=maps, flash=flash,
                               config=FitConfig("illumination", learning_rate=SCENE_RATE, iterations=500))
        assert np.mean(np.abs(got.amplitudes - bank.amplitudes)) <= 0.1

    def test_black_target_drives_amplitudes_down(self, scene):
        cam, gb, maps, bank, flash, fl, nf = scene
        black = np.zeros_like(nf)
        cfg = FitConfig("illumination", learning_rate=SCENE_RATE, iterations=300)
        assert fit_illumination(fl, black, gb, albedo=maps, flash=flash, config=cfg).amplitudes.max() <= 1e-6
        # from a lit (but unsaturated) start; a clipped prediction carries no gradient
        start = make_bank(np.full((24, 3), 0.1))
        from flashsg.inverse.fitting import _illumination
        got, res = _illumination(fl, black, gb, maps, cfg, flash, init_bank=start)
        assert got.amplitudes.mean() < 0.05 * start.amplitudes.mean()
        assert res.best_loss < res.losses[0]

    @settings(max_examples=5, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_amplitudes_stay_in_range(self, seed):
        cam, gb, maps, bank, flash, fl, nf = sphere_scene(16)
        nf = np.random.default_rng(seed).integers(0, 256, nf.shape).astype(np.uint8)
        got = fit_illumination(fl, nf, gb, flash=flash, config=FitConfig("illumination", learning_rate=0.5,
                                                                         iterations=30))
        assert got.amplitudes.min() >= 0 and got.amplitudes.max() <= 2

    def test_empty_mask(self, scene):
        cam, gb, maps, bank, flash, fl, nf = scene
        from dataclasses import replace
        empty = replace(gb, mask=np.zeros_like(gb.mask))
        with pytest.raises(ContractError):
            fit_illumination(fl, nf, empty)


class TestSvbrdf:
    def test_lambertian_sphere(self):
        cam, gb, maps, bank, flash, fl, nf = sphere_scene(32, kd=0.55, ks=0.0, rough=0.6)
        got = fit_svbrdf(fl, gb, bank, flash, FitConfig("svbrdf", iterations=200), noflash=nf)
        assert masked_mse(got.diffuse, maps.diffuse, gb.mask) <= 0.01

    def test_glossy_sphere(self):
        cam, gb, maps, bank, flash, fl, nf = sphere_scene(32, kd=0.35, ks=0.3, rough=0.3)
        got = fit_svbrdf(fl, gb, bank, flash, FitConfig("svbrdf", iterations=200), noflash=nf)
        assert masked_mse(got.diffuse, maps.diffuse, gb.mask) <= 0.01
        assert masked_mse(got.specular, maps.specular, gb.mask) <= 0.02
        assert masked_mse(got.roughness, maps.roughness, gb.mask) <= 0.02

    def test_zero_iterations_returns_init(self, scene):
        cam, gb, maps, bank, flash, fl, nf = scene
        rng = np.random.default_rng(0)
        h, w = gb.mask.shape
        m = gb.mask
        init = SvbrdfMaps(rng.uniform(0, 1, (h, w, 3)) * m[..., None], rng.uniform(0, 1, (h, w, 3)) * m[..., None],
                          rng.uniform(0.2, 1, (h, w)) * m)
        got = fit_svbrdf(fl, gb, bank, flash, FitConfig("svbrdf", iterations=0), init=init)
        for k in ("diffuse", "specular", "roughness"):
            np.testing.assert_array_equal(getattr(got, k), getattr(init, k))

    def test_outputs_in_range(self, scene):
        cam, gb, maps, bank, flash, fl, nf = scene
        rng = np.random.default_rng(1)
        noisy = np.clip(fl.astype(int) + rng.integers(-60, 60, fl.shape), 0, 255).astype(np.uint8)
        got = fit_svbrdf(noisy, gb, bank, flash, FitConfig("svbrdf", learning_rate=0.05, iterations=40))
        m = gb.mask
        assert got.diffuse[m].min() >= 0 and got.diffuse[m].max() <= 1
        assert got.specular[m].min() >= 0 and got.specular[m].max() <= 1
        assert got.roughness[m].min() >= MIN_ROUGHNESS and got.roughness[m].max() <= 1
        assert not got.diffuse[~m].any() and not got.roughness[~m].any()


class TestJoint:
    def test_stationary_start(self):
        # a fronto-parallel plane with HDR targets: every residual (render, consistency, smoothness) is exactly 0
        cam = Camera(24, 24, 50.0, near=1.0, far=3.0)
        gb = trace_gbuffer([Primitive("box", [0, 0, -2.5], scale=[40.0, 40.0, 0.5])], cam)
        maps = SvbrdfMaps(np.full((24, 24, 3), 0.4), np.full((24, 24, 3), 0.2), np.full((24, 24), 0.4))
        bank = environment_pool()[1]
        flash = FlashLight(np.full(3, 4.0))
        fl = render(gb, maps, bank, flash)
        nf = render(gb, maps, bank, flash, RenderOptions.from_mode("env"))
        from flashsg.inverse.fitting import _joint
        (n, got), res = _joint(fl, gb, maps, bank, flash, FitConfig("joint", iterations=50), camera=cam, noflash=nf)
        assert np.max(np.abs(n - gb.normal)) <= 1e-4
        for k in ("diffuse", "specular", "roughness"):
            assert np.max(np.abs(getattr(got, k) - getattr(maps, k))) <= 1e-4
        assert res.best_loss <= 1e-15 and np.all(np.diff(res.best_so_far) <= 0)

    def test_loss_never_increases(self, scene):
        cam, gb, maps, bank, flash, fl, nf = scene
        from flashsg.inverse.fitting import _joint
        (n, got), res = _joint(fl, gb, maps, bank, flash, FitConfig("joint", iterations=50), camera=cam, noflash=nf)
        assert res.best_loss <= res.losses[0]
        assert np.all(np.diff(res.best_so_far) <= 0)

    def test_perturbed_normals_recovered(self, scene):
        cam, gb, maps, bank, flash, fl, nf = scene
        rng = np.random.default_rng(2)
        m = gb.mask[..., None]
        axis = normalize(np.cross(gb.normal, rng.normal(size=gb.normal.shape)))
        tilt = math.radians(10.0)
        noisy = np.where(m, normalize(math.cos(tilt) * gb.normal + math.sin(tilt) * axis), 0.0)
        before = loss_normal_angular(noisy, gb.normal, gb.mask)
        assert math.degrees(before) == pytest.approx(10.0, abs=1e-9)
        n, _ = refine_joint(fl, gb, maps, bank, flash, FitConfig("joint", learning_rate=1e-3, iterations=300),
                            camera=cam, freeze_maps=True, normals=noisy, noflash=nf)
        assert loss_normal_angular(n, gb.normal, gb.mask) <= 0.5 * before
        np.testing.assert_allclose(np.linalg.norm(n[gb.mask], axis=-1), 1.0, atol=1e-12)


class TestEstimators:
    def test_clone_and_params(self):
        est = CascadeFitter(illumination_iterations=5, learning_rate=1e-3)
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        assert SvbrdfEstimator().get_params()["iterations"] == 5000
        assert JointRefiner(freeze_maps=True).set_params(iterations=3).iterations == 3

    def test_predict_before_fit(self, scene):
        from sklearn.exceptions import NotFittedError
        cam, gb, maps, bank, flash, fl, nf = scene
        with pytest.raises(NotFittedError):
            IlluminationEstimator().predict(Capture(fl, nf, gb, cam, flash))

    def test_cascade_end_to_end(self, scene):
        cam, gb, maps, bank, flash, fl, nf = scene
        cap = Capture(fl, nf, gb, cam, flash)
        est = CascadeFitter(illumination_iterations=200, svbrdf_iterations=50, joint_iterations=20,
                            learning_rate=SCENE_RATE).fit(cap)
        assert set(est.loss_curves_) == {"illumination", "svbrdf", "joint"}
        img = est.predict(cap)
        assert img.shape == fl.shape and np.all(np.isfinite(img))

    def test_missing_inputs(self, scene):
        cam, gb, maps, bank, flash, fl, nf = scene
        cap = Capture(fl, nf, gb, cam, flash)
        with pytest.raises(ContractError):
            CascadeFitter(stages=("svbrdf",)).fit(cap)
        with pytest.raises(ContractError):
            CascadeFitter(stages=("paint",)).fit(cap)

    def test_capture_size_mismatch(self, scene):
        cam, gb, maps, bank, flash, fl, nf = scene
        with pytest.raises(ContractError):
            Capture(fl[:-1], nf, gb, cam, flash)
