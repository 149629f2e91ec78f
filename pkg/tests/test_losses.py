"""Tests for the photometric, structural, volume and frequency losses"""

import math

import numpy as np
import pytest

from modules.errors import ConfigError, ShapeMismatchError
from modules.losses import (FrequencyPyramidConfig, LossWeights, downsample, frequency_pyramid_grad,
                            frequency_pyramid_loss, gaussian_window, high_pass_spectrum, l1_loss, psnr,
                            ssim, ssim_with_grad, total_loss, upsample_adjoint, volume_grad, volume_loss)

from tests.helpers import central_difference, rel_err


def naive_masked_dft(image, cutoff, band="high"):
    H, W = image.shape
    out = np.zeros((H, W), dtype=complex)
    for u in range(H):
        for v in range(W):
            fu = (u if u < H - u else u - H) / H
            fv = (v if v < W - v else v - W) / W
            inside = math.hypot(fu, fv) < cutoff * 0.5
            if inside == (band == "high"):
                continue
            s = 0j
            for m in range(H):
                for n in range(W):
                    s += image[m, n] * complex(math.cos(-2 * math.pi * (u * m / H + v * n / W)),
                                               math.sin(-2 * math.pi * (u * m / H + v * n / W)))
            out[u, v] = s
    return out


def test_l1_scalar_loop(rng):
    a, b = rng.random((4, 5, 3)), rng.random((4, 5, 3))
    expected = sum(abs(x - y) for x, y in zip(a.reshape(-1), b.reshape(-1))) / a.size
    assert l1_loss(a, b) == pytest.approx(expected, abs=1e-14)


def test_shape_mismatch_rejected(rng):
    with pytest.raises(ShapeMismatchError):
        l1_loss(rng.random((4, 4, 3)), rng.random((4, 5, 3)))


def test_ssim_identity_and_symmetry(rng):
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, b) < 1.0


def test_ssim_rejects_small_images(rng):
    with pytest.raises(ConfigError):
        ssim(rng.random((8, 8, 3)), rng.random((8, 8, 3)))


def test_gaussian_window_normalised():
    win = gaussian_window()
    assert win.shape == (11, 11)
    assert win.sum() == pytest.approx(1.0, abs=1e-14)


def test_ssim_gradient(rng):
    a, b = rng.random((13, 12, 2)), rng.random((13, 12, 2))
    _, grad = ssim_with_grad(a, b)
    assert rel_err(grad, central_difference(lambda: ssim(a, b), a)) < 1e-5


def test_volume_scalar_loop(rng):
    scales = rng.random((6, 3))
    expected = sum(s[0] * s[1] * s[2] for s in scales)
    assert volume_loss(scales) == pytest.approx(expected, abs=1e-14)
    assert rel_err(volume_grad(scales), central_difference(lambda: volume_loss(scales), scales)) < 1e-6


def test_high_pass_matches_naive_dft(rng):
    image = rng.random((16, 16))
    np.testing.assert_allclose(high_pass_spectrum(image, 0.15), naive_masked_dft(image, 0.15), atol=1e-8)
    np.testing.assert_allclose(high_pass_spectrum(image, 0.5, "low"), naive_masked_dft(image, 0.5, "low"),
                               atol=1e-8)


def test_single_scale_loss_matches_naive_dft(rng):
    a, b = rng.random((16, 16)), rng.random((16, 16))
    cfg = FrequencyPyramidConfig(scales=[1.0], weights=[1.0])
    expected = np.abs(naive_masked_dft(a - b, cfg.cutoff)).sum() / 256
    assert frequency_pyramid_loss(a, b, cfg) == pytest.approx(expected, abs=1e-8)


def test_frequency_loss_identities(rng):
    image = rng.random((32, 32, 3))
    assert frequency_pyramid_loss(image, image) == 0.0
    assert frequency_pyramid_loss(image, image + 0.3) == pytest.approx(0.0, abs=1e-10)
    assert frequency_pyramid_loss(image, rng.random((32, 32, 3))) > 0


def test_frequency_loss_gradient(rng):
    a, b = rng.random((16, 12, 3)), rng.random((16, 12, 3))
    cfg = FrequencyPyramidConfig(scales=[1.0, 0.5], weights=[1.0, 0.5])
    _, grad = frequency_pyramid_grad(a, b, cfg)
    assert rel_err(grad, central_difference(lambda: frequency_pyramid_loss(a, b, cfg), a)) < 1e-5


def test_small_pyramid_level_is_skipped(rng):
    a, b = rng.random((12, 12)), rng.random((12, 12))
    cfg = FrequencyPyramidConfig(scales=[1.0, 0.25], weights=[1.0, 1.0])
    single = FrequencyPyramidConfig(scales=[1.0], weights=[1.0])
    assert frequency_pyramid_loss(a, b, cfg) == pytest.approx(frequency_pyramid_loss(a, b, single))


def test_downsample_and_adjoint(rng):
    x = rng.random((6, 8))
    y = rng.random((3, 4))
    np.testing.assert_allclose(downsample(x)[0, 0], x[:2, :2].mean())
    # <D x, y> == <x, D^T y>
    assert np.sum(downsample(x) * y) == pytest.approx(np.sum(x * upsample_adjoint(y, x.shape)))


def test_pyramid_config_validation():
    with pytest.raises(ConfigError):
        FrequencyPyramidConfig(scales=[0.3], weights=[1.0])
    with pytest.raises(ConfigError):
        FrequencyPyramidConfig(scales=[1.0, 0.5], weights=[1.0])
    with pytest.raises(ConfigError):
        FrequencyPyramidConfig(cutoff=1.5)
    with pytest.raises(ConfigError):
        LossWeights(ssim=1.5)


def test_empty_window_disables_regulariser():
    cfg = FrequencyPyramidConfig(active_window=(1, 0))
    assert not cfg.is_active(1)
    assert FrequencyPyramidConfig().is_active(5000)
    assert not FrequencyPyramidConfig().is_active(100)


def test_total_loss_composition(rng):
    render, gt = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    scales = rng.random((5, 3)) * 0.1
    weights = LossWeights()
    fpr = FrequencyPyramidConfig()
    out = total_loss(render, gt, scales, weights, fpr, iteration=5000)
    expected = (0.8 * l1_loss(render, gt) + 0.2 * (1 - ssim(render, gt)) + 0.01 * volume_loss(scales)
                + 0.01 * frequency_pyramid_loss(render, gt, fpr))
    assert out.total == pytest.approx(expected, abs=1e-12)
    outside = total_loss(render, gt, scales, weights, fpr, iteration=10)
    assert outside.hf == 0.0
    assert outside.total == pytest.approx(expected - 0.01 * frequency_pyramid_loss(render, gt, fpr), abs=1e-12)
    assert set(out.row()) == {'l1', 'ssim', 'vol', 'hf', 'total'}


def test_total_loss_gradient(rng):
    render, gt = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    scales = rng.random((4, 3))
    out = total_loss(render, gt, scales, iteration=None)
    f = lambda: total_loss(render, gt, scales, iteration=None).total
    assert rel_err(out.grad_image, central_difference(f, render)) < 1e-5
    assert rel_err(out.grad_scales, central_difference(f, scales)) < 1e-5


def test_psnr_values(rng):
    a = rng.random((8, 8, 3))
    assert psnr(a, a) == math.inf
    assert psnr(np.zeros((10, 10)), np.full((10, 10), 0.1)) == pytest.approx(20.0, abs=1e-12)
