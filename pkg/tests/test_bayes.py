import json

import numpy as np
import pytest

from ldctbayes import autodiff as ad
from ldctbayes.bayes import (JINV_KERNEL, TrainConfig, TrainingDiverged, jinv_seed, loss_terms,
                             manifest_json, mc_reconstruct, reconstruct_pipeline, running_means, train)
from ldctbayes.network import NetworkSpec, build_network, forward, sample_mask
from ldctbayes.projector import FanBeamGeometry, FanBeamOperator, ImageGrid, Sinogram, forward_project
from ldctbayes.sim import DoseModel, log_transform, make_phantom, simulate_counts

SPEC = NetworkSpec(depth=2, c_d=8, c_u=8, c_s=4)


@pytest.fixture(scope="module")
def problem():
    g = FanBeamGeometry(48, 48)
    n = 32
    ps = g.fit_pixel_size(n)
    ph = make_phantom(n, attenuation_max=0.2, pixel_size_mm=ps)
    dose = DoseModel(1e4, 10.0)
    y = log_transform(simulate_counts(ph, g, dose, 0), dose)
    return g, ph, y, ps


def test_jinv_kernel():
    assert JINV_KERNEL.sum() == pytest.approx(1.0)
    assert JINV_KERNEL[1, 1] == 0.0


def test_jinv_constant_image_is_fixed():
    x = ImageGrid(np.full((8, 8), 3.25))
    np.testing.assert_allclose(jinv_seed(x, 0.3, 1).values, 3.25)


def test_jinv_extremes():
    x = ImageGrid(np.random.default_rng(0).random((8, 8)))
    np.testing.assert_array_equal(jinv_seed(x, 1.0, 0).values, x.values)
    hot = np.zeros((5, 5))
    hot[2, 2] = 1.0
    s = jinv_seed(ImageGrid(hot), 0.0, 0).values
    assert s[2, 2] == 0.0
    np.testing.assert_allclose(s[1:4, 1:4], JINV_KERNEL[::-1, ::-1])


def test_jinv_excludes_own_value():
    rng = np.random.default_rng(1)
    x = rng.random((10, 10))
    a = jinv_seed(ImageGrid(x), 0.3, 7).values
    x2 = x.copy()
    x2[4, 6] += 5.0
    b = jinv_seed(ImageGrid(x2), 0.3, 7).values
    if a[4, 6] != x[4, 6]:  # pixel was replaced by the neighbourhood average
        assert a[4, 6] == b[4, 6]


def test_jinv_rejects_bad_input():
    with pytest.raises(ValueError):
        jinv_seed(ImageGrid(np.ones((4, 4))), 1.5, 0)
    with pytest.raises(ValueError):
        jinv_seed(np.array([[np.nan, 1.0]]), 0.3, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="map")
    with pytest.raises(ValueError):
        TrainConfig(K=0)
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    s = TrainConfig(seed=4).substreams()
    assert len(set(s.values())) == 4
    assert s == TrainConfig(seed=4).substreams()


def test_loss_decomposition_exact(problem):
    g, ph, y, ps = problem
    op = FanBeamOperator(g, ph.shape, ps)
    ws = build_network(SPEC, 0, dtype=np.float64)
    x0n = np.random.default_rng(0).random(ph.shape)
    mask = sample_mask(SPEC, ph.shape, 0, 0)
    t0, f0, v0 = loss_terms(ws, SPEC, x0n, 0.2, y.values, op, 0.0, 1e-6, mask)
    t1, f1, v1 = loss_terms(ws, SPEC, x0n, 0.2, y.values, op, 0.7, 1e-6, mask)
    assert t0.item() == f0.item()
    assert f0.item() == f1.item()
    assert t1.item() - t0.item() == pytest.approx(0.7 * v1.item(), rel=1e-10)


def test_loss_gradient_matches_finite_differences(problem):
    g, ph, y, ps = problem
    op = FanBeamOperator(g, ph.shape, ps)
    ws = build_network(SPEC, 0, dtype=np.float64)
    x0n = np.random.default_rng(0).random(ph.shape)
    w = ws["out.conv.w"]
    err = ad.gradcheck(lambda: loss_terms(ws, SPEC, x0n, 0.2, y.values, op, 0.0, 1e-6)[0], [w])
    assert err < 1e-4


def test_training_reduces_loss_and_is_deterministic(problem):
    g, ph, y, ps = problem
    cfg = TrainConfig(alpha=0.05, lr=3e-3, iterations=200, seed=0)
    x0 = jinv_seed(ImageGrid(np.full(ph.shape, 0.05), ps), 0.3, 0)
    x0 = ImageGrid(x0.values + 0.01 * np.random.default_rng(0).random(ph.shape), ps)
    a = train(y, g, SPEC, cfg, x0)
    assert a.loss.shape == (200, 3)
    assert a.loss[-1, 0] < a.loss[0, 0]
    b = train(y, g, SPEC, cfg, x0)
    for k in a.weights:
        np.testing.assert_array_equal(a.weights[k].data, b.weights[k].data)
    np.testing.assert_array_equal(a.loss, b.loss)


def test_training_divergence_reported(problem):
    g, ph, y, ps = problem
    bad = Sinogram(np.full(y.values.shape, 1e200))
    x0 = ImageGrid(np.random.default_rng(0).random(ph.shape), ps)
    with pytest.raises(TrainingDiverged) as info:
        train(bad, g, SPEC, TrainConfig(iterations=3, lr=1e-3), x0)
    assert info.value.iteration == 0


def test_resample_seed_needs_fbp(problem):
    g, ph, y, ps = problem
    with pytest.raises(ValueError):
        train(y, g, SPEC, TrainConfig(iterations=1, resample_seed=True), ph)


def test_mc_reconstruct_mean_and_variance():
    spec = NetworkSpec(depth=2, c_d=4, c_u=4, c_s=4, p_s=0.3)
    ws = build_network(spec, 1)
    x0 = ImageGrid(np.random.default_rng(2).random((16, 16)))
    res = mc_reconstruct(ws, spec, x0, 6, seed=3, keep_samples=True)
    stack = np.stack(res.samples)
    np.testing.assert_allclose(res.mean_image.values, stack.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(res.variance, stack.var(axis=0, ddof=1), atol=1e-12)
    assert np.all(res.variance >= 0)
    one = mc_reconstruct(ws, spec, x0, 1, seed=3, keep_samples=True)
    np.testing.assert_array_equal(one.mean_image.values, one.samples[0])
    assert not one.variance.any()


def test_mc_reconstruct_dip_tv_degenerate():
    spec = NetworkSpec(depth=2, c_d=4, c_u=4, c_s=4, p_s=0.3)
    ws = build_network(spec, 1)
    x0 = ImageGrid(np.random.default_rng(2).random((16, 16)))
    base = mc_reconstruct(ws, spec, x0, 1, seed=0, mode="dip_tv")
    for k in (2, 7, 16):
        r = mc_reconstruct(ws, spec, x0, k, seed=k, mode="dip_tv")
        np.testing.assert_array_equal(r.mean_image.values, base.mean_image.values)
        assert not r.variance.any()
    with ad.no_grad():
        direct = forward(ws, spec, x0.values).data[0].astype(np.float64)
    np.testing.assert_array_equal(base.mean_image.values, direct)


def test_running_means():
    s = [np.full((2, 2), float(v)) for v in (1, 2, 3, 6)]
    m = running_means(s, [1, 2, 4])
    assert m[1][0, 0] == 1 and m[2][0, 0] == 1.5 and m[4][0, 0] == 3


def test_pipeline_manifest_is_reproducible(problem):
    g, ph, y, ps = problem
    cfg = TrainConfig(alpha=0.05, lr=1e-3, iterations=20, K=3, seed=2)
    a = reconstruct_pipeline(y, g, SPEC, cfg, ph.shape, ps)
    b = reconstruct_pipeline(y, g, SPEC, cfg, ph.shape, ps)
    assert manifest_json(a) == manifest_json(b)
    man = json.loads(manifest_json(a))
    assert man["seeds"] == cfg.substreams()
    assert man["train_config"]["K"] == 3


def test_pipeline_modes_differ_only_in_masks(problem, monkeypatch):
    # dip_tv never asks for a mask; proposed asks once per iteration and per draw
    import ldctbayes.bayes as bayes

    g, ph, y, ps = problem
    calls = []
    real = bayes.sample_mask

    def spy(*args):
        calls.append(args[3])
        return real(*args)

    monkeypatch.setattr(bayes, "sample_mask", spy)
    reconstruct_pipeline(y, g, SPEC, TrainConfig(iterations=4, K=3, mode="dip_tv", lr=1e-3), ph.shape, ps)
    assert calls == []
    reconstruct_pipeline(y, g, SPEC, TrainConfig(iterations=4, K=3, lr=1e-3), ph.shape, ps)
    assert calls == [0, 1, 2, 3, 0, 1, 2]


def test_pipeline_accepts_raw_counts(problem):
    g, ph, y, ps = problem
    dose = DoseModel(1e4, 10.0)
    raw = simulate_counts(ph, g, dose, 0)
    cfg = TrainConfig(iterations=2, K=2, lr=1e-3)
    a = reconstruct_pipeline(raw, g, SPEC, cfg, ph.shape, ps, dose=dose)
    b = reconstruct_pipeline(y, g, SPEC, cfg, ph.shape, ps)
    np.testing.assert_array_equal(a.mean_image.values, b.mean_image.values)
    with pytest.raises(ValueError):
        reconstruct_pipeline(raw, g, SPEC, cfg, ph.shape, ps)


def test_noiseless_fit_capacity():
    # alpha = 0 and clean data: the network can drive the data term far down
    g = FanBeamGeometry(48, 48)
    n = 16
    ps = g.fit_pixel_size(n)
    ph = make_phantom(n, attenuation_max=0.2, pixel_size_mm=ps)
    y = forward_project(ph, g)
    spec = NetworkSpec(depth=2, c_d=16, c_u=16, c_s=4, p_s=0.0)
    cfg = TrainConfig(alpha=0.0, lr=5e-3, iterations=1500, K=1)
    res = reconstruct_pipeline(y, g, spec, cfg, ph.shape, ps)
    assert res.loss[-1, 1] < 1e-3 * float(np.sum(y.values**2))
