"""
Losses Module
Photometric, structural, volume and frequency-pyramid objectives with analytic
image gradients, plus PSNR/SSIM evaluation metrics
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.signal import convolve2d, correlate2d

from modules.errors import ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
MIN_PYRAMID_SIZE = 4

_warned_scales = set()


@dataclass
class LossWeights:
    ssim: float = 0.2
    vol: float = 0.01
    hf: float = 0.01

    def __post_init__(self):
        for name in ('ssim', 'vol', 'hf'):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.loss.{name}", "must be non-negative")
        if self.ssim > 1:
            raise ConfigError("train.loss.ssim", "must be at most 1")


@dataclass
class FrequencyPyramidConfig:
    scales: List[float] = field(default_factory=lambda: [1.0, 0.5, 0.25])
    weights: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    cutoff: float = 0.15
    active_window: Tuple[int, int] = (3000, 15000)
    band: str = "high"

    def __post_init__(self):
        if not self.scales:
            raise ConfigError("train.fpr.scales", "need at least one scale")
        if len(self.weights) != len(self.scales):
            raise ConfigError("train.fpr.weights", "need one weight per scale")
        if any(w <= 0 for w in self.weights):
            raise ConfigError("train.fpr.weights", "weights must be positive")
        for s in self.scales:
            levels = -math.log2(s) if s > 0 else -1
            if s <= 0 or s > 1 or abs(levels - round(levels)) > 1e-9:
                raise ConfigError("train.fpr.scales", f"scale {s} is not a power of 1/2")
        if not 0 < self.cutoff < 1:
            raise ConfigError("train.fpr.cutoff", "must lie in (0, 1)")
        if self.band not in ("high", "low"):
            raise ConfigError("train.fpr.band", f"unknown band '{self.band}'")
        # start > end is an empty window
        self.active_window = (int(self.active_window[0]), int(self.active_window[1]))

    def is_active(self, iteration: Optional[int]) -> bool:
        if iteration is None:
            return True
        return self.active_window[0] <= iteration <= self.active_window[1]


@dataclass
class LossBreakdown:
    l1: float
    ssim: float
    vol: float
    hf: float
    total: float
    grad_image: np.ndarray
    grad_scales: np.ndarray

    def row(self) -> dict:
        return {'l1': self.l1, 'ssim': self.ssim, 'vol': self.vol, 'hf': self.hf, 'total': self.total}


def _check_pair(render: np.ndarray, gt: np.ndarray) -> None:
    if render.shape != gt.shape:
        raise ShapeMismatchError(f"render {render.shape} and target {gt.shape} differ in shape")


def _channels(image: np.ndarray) -> np.ndarray:
    return image[:, :, None] if image.ndim == 2 else image


def l1_loss(render: np.ndarray, gt: np.ndarray) -> float:
    _check_pair(render, gt)
    return float(np.mean(np.abs(render - gt)))


def l1_grad(render: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.sign(render - gt) / render.size


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-x * x / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(x: np.ndarray, y: np.ndarray, win: np.ndarray, want_grad: bool):
    f = lambda img: correlate2d(img, win, mode='valid')
    mu1, mu2 = f(x), f(y)
    exx, eyy, exy = f(x * x), f(y * y), f(x * y)
    s1 = exx - mu1 * mu1
    s2 = eyy - mu2 * mu2
    s12 = exy - mu1 * mu2
    A1 = 2.0 * mu1 * mu2 + SSIM_C1
    A2 = 2.0 * s12 + SSIM_C2
    B1 = mu1 * mu1 + mu2 * mu2 + SSIM_C1
    B2 = s1 + s2 + SSIM_C2
    smap = (A1 * A2) / (B1 * B2)
    if not want_grad:
        return smap, None
    d_mu1 = 2.0 * mu2 * (A2 - A1) / (B1 * B2) - 2.0 * mu1 * smap * (1.0 / B1 - 1.0 / B2)
    d_exx = -smap / B2
    d_exy = 2.0 * A1 / (B1 * B2)
    adj = lambda g: convolve2d(g, win, mode='full')
    return smap, (d_mu1, d_exx, d_exy, adj)


def _ssim_impl(render: np.ndarray, gt: np.ndarray, want_grad: bool):
    _check_pair(render, gt)
    r, g = _channels(render), _channels(gt)
    H, W, C = r.shape
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ConfigError("ssim", f"image {H}x{W} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()
    total = 0.0
    grad = np.zeros_like(r) if want_grad else None
    for c in range(C):
        smap, parts = _ssim_channel(r[:, :, c], g[:, :, c], win, want_grad)
        total += smap.mean()
        if want_grad:
            d_mu1, d_exx, d_exy, adj = parts
            scale = 1.0 / (C * smap.size)
            grad[:, :, c] = scale * (adj(d_mu1) + 2.0 * r[:, :, c] * adj(d_exx) + g[:, :, c] * adj(d_exy))
    value = total / C
    if want_grad and render.ndim == 2:
        grad = grad[:, :, 0]
    return value, grad


def ssim(render: np.ndarray, gt: np.ndarray) -> float:
    """Mean local SSIM, 11x11 Gaussian window, channels averaged"""
    return float(_ssim_impl(render, gt, False)[0])


def ssim_with_grad(render: np.ndarray, gt: np.ndarray) -> Tuple[float, np.ndarray]:
    value, grad = _ssim_impl(render, gt, True)
    return float(value), grad


# ---------------------------------------------------------------------------
# volume
# ---------------------------------------------------------------------------

def volume_loss(scales: np.ndarray) -> float:
    scales = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    return float(np.prod(scales, axis=1).sum())


def volume_grad(scales: np.ndarray) -> np.ndarray:
    scales = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    grad = np.empty_like(scales)
    grad[:, 0] = scales[:, 1] * scales[:, 2]
    grad[:, 1] = scales[:, 0] * scales[:, 2]
    grad[:, 2] = scales[:, 0] * scales[:, 1]
    return grad


# ---------------------------------------------------------------------------
# frequency pyramid
# ---------------------------------------------------------------------------

def frequency_mask(height: int, width: int, cutoff: float, band: str = "high") -> np.ndarray:
    """Ideal radial mask over fft2 bins; radius measured in cycles/sample, Nyquist = 0.5"""
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    radius = np.sqrt(fy * fy + fx * fx)
    inside = radius < cutoff * 0.5
    return (~inside if band == "high" else inside).astype(np.float64)


def high_pass_spectrum(image: np.ndarray, cutoff: float = 0.15, band: str = "high") -> np.ndarray:
    """Masked 2D DFT over the first two axes (per channel for colour images)"""
    image = np.asarray(image, dtype=np.float64)
    mask = frequency_mask(image.shape[0], image.shape[1], cutoff, band)
    spectrum = np.fft.fft2(image, axes=(0, 1))
    if image.ndim == 3:
        mask = mask[:, :, None]
    return spectrum * mask


def downsample(image: np.ndarray) -> np.ndarray:
    """Half-resolution bilinear reduction (2x2 box average); an odd trailing row/column is dropped"""
    H, W = image.shape[0] // 2, image.shape[1] // 2
    cropped = image[:2 * H, :2 * W]
    return 0.25 * (cropped[0::2, 0::2] + cropped[1::2, 0::2] + cropped[0::2, 1::2] + cropped[1::2, 1::2])


def upsample_adjoint(grad: np.ndarray, shape: tuple) -> np.ndarray:
    out = np.zeros(shape)
    H, W = grad.shape[0], grad.shape[1]
    spread = 0.25 * grad
    for dr in (0, 1):
        for dc in (0, 1):
            out[dr:2 * H:2, dc:2 * W:2] = spread
    return out


def _pyramid_levels(scale: float) -> int:
    return int(round(-math.log2(scale)))


def _frequency_impl(render: np.ndarray, gt: np.ndarray, cfg: FrequencyPyramidConfig, want_grad: bool):
    _check_pair(render, gt)
    diff = _channels(render - gt)
    total = 0.0
    grad = np.zeros_like(diff) if want_grad else None
    for scale, weight in zip(cfg.scales, cfg.weights):
        levels = _pyramid_levels(scale)
        shapes = []
        d = diff
        for _ in range(levels):
            shapes.append(d.shape)
            d = downsample(d)
        h, w = d.shape[0], d.shape[1]
        if h < MIN_PYRAMID_SIZE or w < MIN_PYRAMID_SIZE:
            key = (diff.shape[:2], scale)
            if key not in _warned_scales:
                _warned_scales.add(key)
                logger.warning(f"Frequency pyramid scale {scale} gives {h}x{w} image; skipped")
            continue
        n_s = h * w
        mask = frequency_mask(h, w, cfg.cutoff, cfg.band)[:, :, None]
        Z = np.fft.fft2(d, axes=(0, 1)) * mask
        mag = np.abs(Z)
        total += weight / n_s * mag.sum()
        if want_grad:
            unit = np.divide(Z, mag, out=np.zeros_like(Z), where=mag > 0)
            # adjoint of the unnormalised DFT is n_s * ifft2
            g = weight / n_s * np.real(n_s * np.fft.ifft2(mask * unit, axes=(0, 1)))
            for shape in reversed(shapes):
                g = upsample_adjoint(g, shape)
            grad += g
    if want_grad and render.ndim == 2:
        grad = grad[:, :, 0]
    return total, grad


def frequency_pyramid_loss(render: np.ndarray, gt: np.ndarray,
                           cfg: FrequencyPyramidConfig = None) -> float:
    return float(_frequency_impl(render, gt, cfg or FrequencyPyramidConfig(), False)[0])


def frequency_pyramid_grad(render: np.ndarray, gt: np.ndarray,
                           cfg: FrequencyPyramidConfig = None) -> Tuple[float, np.ndarray]:
    value, grad = _frequency_impl(render, gt, cfg or FrequencyPyramidConfig(), True)
    return float(value), grad


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------

def total_loss(render: np.ndarray, gt: np.ndarray, scales: np.ndarray,
               weights: LossWeights = None, fpr_cfg: FrequencyPyramidConfig = None,
               iteration: Optional[int] = None) -> LossBreakdown:
    """(1-l)*L1 + l*(1-SSIM) + l_vol*vol + l_hf*hf with gradients w.r.t. pixels and scales"""
    weights = weights or LossWeights()
    fpr_cfg = fpr_cfg or FrequencyPyramidConfig()
    _check_pair(render, gt)

    l1 = l1_loss(render, gt)
    grad = (1.0 - weights.ssim) * l1_grad(render, gt)
    if weights.ssim > 0:
        s, s_grad = ssim_with_grad(render, gt)
        grad = grad - weights.ssim * s_grad
    else:
        s = ssim(render, gt)

    vol = volume_loss(scales)
    grad_scales = weights.vol * volume_grad(scales)

    hf = 0.0
    hf_on = weights.hf > 0 and fpr_cfg.is_active(iteration)
    if hf_on:
        hf, hf_grad = frequency_pyramid_grad(render, gt, fpr_cfg)
        grad = grad + weights.hf * hf_grad

    total = (1.0 - weights.ssim) * l1 + weights.ssim * (1.0 - s) + weights.vol * vol
    if hf_on:
        total += weights.hf * hf
    return LossBreakdown(l1, s, vol, hf, total, grad, grad_scales)


def psnr(render: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio for unit-range images; inf when identical"""
    _check_pair(render, gt)
    mse = float(np.mean((render - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
