import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldctbayes.metrics import evaluate, gaussian_window, line_profile, psnr, rmse, ssim, to_hu


def ssim_naive(x, ref):
    """Direct per-window SSIM with explicit loops (the reference oracle)."""
    w = gaussian_window()
    k = w.shape[0]
    L = ref.max() - ref.min()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for i in range(x.shape[0] - k + 1):
        for j in range(x.shape[1] - k + 1):
            a = x[i:i + k, j:j + k]
            b = ref[i:i + k, j:j + k]
            ma, mb = np.sum(w * a), np.sum(w * b)
            va = np.sum(w * (a - ma) ** 2)
            vb = np.sum(w * (b - mb) ** 2)
            cov = np.sum(w * (a - ma) * (b - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_psnr_convention_peak_is_reference_max():
    ref = np.zeros((8, 8))
    ref[0, 0] = 0.5
    x = ref + 0.0038
    assert rmse(x, ref) == pytest.approx(0.0038)
    assert psnr(x, ref) == pytest.approx(20 * math.log10(0.5 / 0.0038))
    assert psnr(x, ref) == pytest.approx(42.38, abs=0.01)


def test_psnr_identical_is_infinite():
    x = np.random.default_rng(0).random((4, 4))
    assert psnr(x, x) == math.inf
    assert rmse(x, x) == 0.0


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        rmse(np.zeros((3, 3)), np.zeros((3, 4)))


def test_gaussian_window():
    w = gaussian_window()
    assert w.shape == (11, 11)
    assert w.sum() == pytest.approx(1.0)
    assert w[5, 5] == w.max()
    np.testing.assert_allclose(w, w.T)


def test_ssim_self_is_exactly_one():
    x = np.random.default_rng(1).random((24, 20))
    assert ssim(x, x) == 1.0


def test_ssim_checkerboard_anticorrelated():
    i, j = np.indices((32, 32))
    board = ((i + j) % 2).astype(float)
    assert ssim(1.0 - board, board) < 0


def test_ssim_matches_naive_oracle():
    rng = np.random.default_rng(2)
    ref = rng.random((19, 23))
    x = ref + 0.1 * rng.standard_normal(ref.shape)
    assert abs(ssim(x, ref) - ssim_naive(x, ref)) <= 1e-10


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), sigma=st.floats(0.01, 1.0))
def test_ssim_bounded(seed, sigma):
    rng = np.random.default_rng(seed)
    ref = rng.random((16, 16))
    x = ref + sigma * rng.standard_normal(ref.shape)
    assert -1.0 <= ssim(x, ref) <= 1.0


def test_line_profile():
    x = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(line_profile(x, 1, axis=0), [4, 5, 6, 7])
    np.testing.assert_array_equal(line_profile(x, 2, axis=1), [2, 6, 10])
    with pytest.raises(IndexError):
        line_profile(x, 3, axis=0)


def test_hu_anchors():
    np.testing.assert_allclose(to_hu([0.0, 0.02, 0.04], 0.02), [-1000, 0, 1000])


def test_evaluate_report():
    ref = np.zeros((16, 16))
    ref[4:12, 4:12] = 1.0
    x = ref + 0.01
    mask = np.zeros_like(ref, dtype=bool)
    mask[2:14, 2:14] = True
    rep = evaluate(x, ref, mask, mu_water=0.02)
    assert rep.rmse == pytest.approx(0.01)
    assert rep.rmse_fov == pytest.approx(0.01)
    assert rep.rmse_hu == pytest.approx(500.0)
    assert rep.psnr_db == pytest.approx(40.0)
    assert set(evaluate(x, ref).to_dict()) == {"psnr_db", "rmse", "ssim"}
