import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldctbayes.metrics import psnr
from ldctbayes.projector import (FanBeamGeometry, FanBeamOperator, ImageGrid, Sinogram, fbp_reconstruct,
                                 forward_project)
from ldctbayes.sim import DoseModel, log_transform, make_phantom, simulate_counts
from ldctbayes.tvsolver import (AdmmConfig, CGBreakdown, conjugate_gradient, div_op, grad_op,
                                pwls_tv_admm, shrink, tv_norm)


def test_shrink_values():
    np.testing.assert_array_equal(shrink([-3.0, -0.5, 0.0, 0.5, 3.0], 1.0), [-2.0, 0.0, 0.0, 0.0, 2.0])
    np.testing.assert_array_equal(shrink([2.0], 0.0), [2.0])


@settings(max_examples=30, deadline=None)
@given(v=st.floats(-1e3, 1e3), t=st.floats(0, 10))
def test_shrink_is_l1_prox(v, t):
    # argmin_z t|z| + (z - v)^2 / 2, checked against a dense grid
    z = float(shrink(v, t))
    grid = np.linspace(z - 1, z + 1, 2001)
    f = lambda q: t * np.abs(q) + 0.5 * (q - v) ** 2
    assert f(z) <= f(grid).min() + 1e-9


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(1, 9), w=st.integers(1, 9))
def test_div_is_negative_adjoint_of_grad(seed, h, w):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((h, w))
    z = rng.standard_normal((2, h, w))
    assert np.vdot(grad_op(x), z) == pytest.approx(-np.vdot(x, div_op(z)), abs=1e-10)


def test_grad_and_tv_values():
    x = np.array([[0.0, 1.0], [3.0, 1.0]])
    g = grad_op(x)
    np.testing.assert_array_equal(g[0], [[1, 0], [-2, 0]])
    np.testing.assert_array_equal(g[1], [[3, 0], [0, 0]])
    assert tv_norm(x) == 6.0
    assert tv_norm(np.full((5, 5), 2.0)) == 0.0


def test_conjugate_gradient_solves_spd_system():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((12, 12))
    a = m @ m.T + 12 * np.eye(12)
    b = rng.standard_normal(12)
    x, steps = conjugate_gradient(lambda v: a @ v, b, np.zeros(12), 50, 1e-12)
    np.testing.assert_allclose(x, np.linalg.solve(a, b), atol=1e-9)
    assert steps <= 13


def test_config_validation():
    with pytest.raises(ValueError):
        AdmmConfig(rho=0)
    with pytest.raises(ValueError):
        AdmmConfig(alpha=-0.1)
    with pytest.raises(ValueError):
        AdmmConfig(outer_iters=0)


def test_alpha_zero_reduces_to_least_squares():
    g = FanBeamGeometry(90, 32)
    n = 8
    ps = g.fit_pixel_size(n)
    rng = np.random.default_rng(1)
    op = FanBeamOperator(g, (n, n), ps)
    a = op.densify()
    y = a @ rng.random(n * n) + 0.01 * rng.standard_normal(a.shape[0])
    x_ls = np.linalg.lstsq(a, y, rcond=None)[0].reshape(n, n)
    cfg = AdmmConfig(alpha=0.0, rho=1.0, outer_iters=30, cg_iters=200, cg_tol=1e-14)
    x, _ = pwls_tv_admm(Sinogram(y.reshape(op.sino_shape)), g, (n, n), ps, cfg)
    assert np.max(np.abs(x.values - x_ls)) < 1e-6 * np.max(np.abs(x_ls))


@pytest.fixture(scope="module")
def noisy():
    g = FanBeamGeometry(120, 96)
    n = 64
    ps = g.fit_pixel_size(n)
    ph = make_phantom(n, attenuation_max=0.2, pixel_size_mm=ps)
    dose = DoseModel(1e3, 10.0)
    y = log_transform(simulate_counts(ph, g, dose, 1), dose)
    return g, ph, y, ps


def test_objective_monotone_and_beats_fbp(noisy):
    g, ph, y, ps = noisy
    cfg = AdmmConfig(alpha=0.3, rho=100.0, outer_iters=60, cg_iters=20)
    x, tr = pwls_tv_admm(y, g, ph.shape, ps, cfg)
    obj = np.array(tr.objective)
    assert np.all(np.diff(obj[4:]) <= 1e-8 * np.abs(obj[4:-1]))
    fbp = fbp_reconstruct(y, g, ph.shape, ps, "hann")
    assert psnr(x.values, ph.values) > psnr(fbp.values, ph.values) + 3.0
    assert len(tr.primal_residual) == 60 and all(r == 100.0 for r in tr.rho)


def test_adaptive_rho_changes_penalty(noisy):
    g, ph, y, ps = noisy
    cfg = AdmmConfig(alpha=0.3, rho=1e-3, outer_iters=10, cg_iters=10, adapt_rho=True)
    _, tr = pwls_tv_admm(y, g, ph.shape, ps, cfg)
    assert len(set(tr.rho)) > 1


def test_non_finite_sinogram_rejected(noisy):
    g, ph, y, ps = noisy
    bad = y.values.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        pwls_tv_admm(Sinogram(bad), g, ph.shape, ps, AdmmConfig(outer_iters=1))


def test_cg_breakdown_reports_trace():
    g = FanBeamGeometry(8, 8)
    y = Sinogram(np.zeros((8, 8)))
    # a NaN start gives NaN curvature in the first CG step
    with pytest.raises(CGBreakdown) as info:
        pwls_tv_admm(y, g, (4, 4), 1.0, AdmmConfig(outer_iters=2), x_init=np.full((4, 4), np.nan))
    assert info.value.trace.objective == []


def test_noiseless_constant_recovered():
    g = FanBeamGeometry(60, 48)
    n = 16
    ps = g.fit_pixel_size(n)
    truth = np.full((n, n), 0.1)
    y = forward_project(ImageGrid(truth, ps), g)
    x, _ = pwls_tv_admm(y, g, (n, n), ps, AdmmConfig(alpha=1e-3, rho=1.0, outer_iters=40, cg_iters=50))
    assert np.max(np.abs(x.values - truth)) < 1e-3
