"""
Rasterizer Module
Differentiable pinhole projection of 3D Gaussians and tile-based
front-to-back alpha blending on the CPU, forward and backward
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from modules.camera import (CameraPose, PinholeCamera, quaternions_to_rotations,
                            rotation_grad_to_quaternion)
from modules.errors import ConfigError, RejectedInputError, UsageError

logger = logging.getLogger(__name__)


@dataclass
class RasterConfig:
    tile_size: int = 16
    dilation: float = 0.3
    near: float = 0.01
    min_alpha: float = 1.0 / 255.0
    max_alpha: float = 0.99
    min_transmittance: float = 1e-4
    workers: int = 1

    def __post_init__(self):
        if self.tile_size < 1:
            raise ConfigError("raster.tile_size", "must be at least 1")
        if not 0 <= self.min_alpha < self.max_alpha < 1:
            raise ConfigError("raster.max_alpha", "need 0 <= min_alpha < max_alpha < 1")
        if self.min_transmittance < 0:
            raise ConfigError("raster.min_transmittance", "must be non-negative")
        if self.near <= 0:
            raise ConfigError("raster.near", "must be positive")


@dataclass
class Splat2D:
    center: np.ndarray
    cov2d: np.ndarray
    color: np.ndarray
    alpha: float
    depth: float


@dataclass
class SplatBatch:
    centers: np.ndarray  # (n, 2) pixels
    covs: np.ndarray     # (n, 2, 2)
    colors: np.ndarray   # (n, 3)
    alphas: np.ndarray   # (n,)
    depths: np.ndarray   # (n,)

    def __len__(self):
        return len(self.alphas)

    @classmethod
    def from_splats(cls, splats: List[Splat2D]) -> "SplatBatch":
        if not splats:
            return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros(0))
        return cls(np.array([s.center for s in splats], dtype=np.float64),
                   np.array([s.cov2d for s in splats], dtype=np.float64),
                   np.array([s.color for s in splats], dtype=np.float64),
                   np.array([s.alpha for s in splats], dtype=np.float64),
                   np.array([s.depth for s in splats], dtype=np.float64))

    def splat(self, i: int) -> Splat2D:
        return Splat2D(self.centers[i], self.covs[i], self.colors[i], float(self.alphas[i]), float(self.depths[i]))

    def validate(self) -> None:
        for name in ('centers', 'covs', 'colors', 'alphas', 'depths'):
            if not np.all(np.isfinite(getattr(self, name))):
                raise RejectedInputError(f"splat {name} contain non-finite values")

    def conics(self) -> np.ndarray:
        """Inverse covariances packed as (a, b, c) of [[a, b], [b, c]]"""
        a, b, c = self.covs[:, 0, 0], self.covs[:, 0, 1], self.covs[:, 1, 1]
        det = a * c - b * b
        return np.stack([c / det, -b / det, a / det], axis=1)


@dataclass
class SplatGrads:
    """cov gradients use the symmetric convention dL = trace(G @ dCov)"""
    centers: np.ndarray
    covs: np.ndarray
    colors: np.ndarray
    alphas: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SplatGrads":
        return cls(np.zeros((n, 2)), np.zeros((n, 2, 2)), np.zeros((n, 3)), np.zeros(n))


@dataclass
class RenderResult:
    image: np.ndarray          # (H, W, 3)
    transmittance: np.ndarray  # (H, W)


def depth_sort(depths: np.ndarray) -> np.ndarray:
    """Stable ascending order; equal depths keep their input order"""
    return np.argsort(np.asarray(depths, dtype=np.float64), kind='stable')


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

@dataclass
class ProjectionResult:
    splats: SplatBatch
    visible: np.ndarray  # (n,) mask over the input Gaussians
    p_cam: np.ndarray
    rot: np.ndarray
    M: np.ndarray
    sigma: np.ndarray
    J: np.ndarray
    T: np.ndarray
    quat: np.ndarray
    scale: np.ndarray


def project_gaussians(mu: np.ndarray, quat: np.ndarray, scale: np.ndarray,
                      color: np.ndarray, alpha: np.ndarray, pose: CameraPose,
                      cam: PinholeCamera, cfg: RasterConfig = None) -> ProjectionResult:
    """EWA projection of n Gaussians; those at or behind the near plane are culled"""
    cfg = cfg or RasterConfig()
    p_all = pose.transform(mu)
    visible = p_all[:, 2] > cfg.near
    p = p_all[visible]
    q, s = quat[visible], scale[visible]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    m = len(p)

    centers = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    rot = quaternions_to_rotations(q)
    M = rot * s[:, None, :]
    sigma = M @ M.transpose(0, 2, 1)
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z ** 2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z ** 2
    T = J @ pose.R
    covs = T @ sigma @ T.transpose(0, 2, 1) + cfg.dilation * np.eye(2)

    splats = SplatBatch(centers, covs, color[visible], alpha[visible], z.copy())
    return ProjectionResult(splats, visible, p, rot, M, sigma, J, T, q, s)


def project(gaussian, pose: CameraPose, cam: PinholeCamera,
            cfg: RasterConfig = None) -> Optional[Splat2D]:
    """Single-Gaussian projection; None when culled"""
    res = project_gaussians(gaussian.mu[None, :], gaussian.quat[None, :], gaussian.scale[None, :],
                            gaussian.color[None, :], np.array([gaussian.alpha]), pose, cam, cfg)
    if not res.visible[0]:
        return None
    return res.splats.splat(0)


def project_backward(proj: ProjectionResult, grads: SplatGrads, pose: CameraPose,
                     cam: PinholeCamera) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """dL/dmu, dL/dquat, dL/dscale for every input Gaussian (zeros where culled)"""
    p, J, T, sigma, M, rot = proj.p_cam, proj.J, proj.T, proj.sigma, proj.M, proj.rot
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    G = grads.covs

    dT = 2.0 * G @ T @ sigma
    d_sigma = T.transpose(0, 2, 1) @ G @ T
    dJ = dT @ pose.R.T

    dp = np.zeros_like(p)
    dp[:, 0] = -dJ[:, 0, 2] * cam.fx / z ** 2 + grads.centers[:, 0] * cam.fx / z
    dp[:, 1] = -dJ[:, 1, 2] * cam.fy / z ** 2 + grads.centers[:, 1] * cam.fy / z
    dp[:, 2] = (-dJ[:, 0, 0] * cam.fx / z ** 2 + dJ[:, 0, 2] * 2.0 * cam.fx * x / z ** 3
                - dJ[:, 1, 1] * cam.fy / z ** 2 + dJ[:, 1, 2] * 2.0 * cam.fy * y / z ** 3
                - grads.centers[:, 0] * cam.fx * x / z ** 2
                - grads.centers[:, 1] * cam.fy * y / z ** 2)

    dM = 2.0 * d_sigma @ M
    d_rot = dM * proj.scale[:, None, :]
    d_scale_vis = (dM * rot).sum(axis=1)
    d_quat_vis = rotation_grad_to_quaternion(proj.quat, d_rot)

    n = len(proj.visible)
    d_mu = np.zeros((n, 3))
    d_quat = np.zeros((n, 4))
    d_scale = np.zeros((n, 3))
    d_mu[proj.visible] = dp @ pose.R
    d_quat[proj.visible] = d_quat_vis
    d_scale[proj.visible] = d_scale_vis
    return d_mu, d_quat, d_scale


# ---------------------------------------------------------------------------
# blending
# ---------------------------------------------------------------------------

def blend_naive(splats: SplatBatch, cam: PinholeCamera, cfg: RasterConfig = None) -> RenderResult:
    """Reference compositor: every pixel walks all splats in global depth order.

    This is the semantic definition of the blend the tiled path must match, and
    the renderer used for synthetic ground truth.
    """
    cfg = cfg or RasterConfig()
    splats.validate()
    H, W = cam.height, cam.width
    ys, xs = np.mgrid[0:H, 0:W]
    px = xs.reshape(-1) + 0.5
    py = ys.reshape(-1) + 0.5
    color = np.zeros((H * W, 3))
    T = np.ones(H * W)
    done = np.zeros(H * W, dtype=bool)
    if len(splats):
        conics = splats.conics()
    for i in depth_sort(splats.depths):
        a, b, c = conics[i]
        dx = px - splats.centers[i, 0]
        dy = py - splats.centers[i, 1]
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        delta = np.minimum(splats.alphas[i] * np.exp(power), cfg.max_alpha)
        use = (delta >= cfg.min_alpha) & ~done
        test_T = T * (1.0 - delta)
        stop = use & (test_T < cfg.min_transmittance)
        done |= stop
        add = use & ~stop
        color[add] += splats.colors[i] * (delta[add] * T[add])[:, None]
        T[add] = test_T[add]
    return RenderResult(color.reshape(H, W, 3), T.reshape(H, W))


@dataclass
class _Tile:
    row0: int
    row1: int
    col0: int
    col1: int
    splats: np.ndarray  # indices into the batch, depth ordered


class TileRasterizer:
    """Tile-binned compositor. forward() caches what backward() recomputes from."""

    def __init__(self, cfg: RasterConfig = None):
        self.cfg = cfg or RasterConfig()
        self._cache = None

    # -- binning ------------------------------------------------------------

    def _extents(self, splats: SplatBatch) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Half-widths of the box outside which a splat cannot reach min_alpha"""
        n = len(splats)
        if self.cfg.min_alpha <= 0.0:
            inf = np.full(n, np.inf)
            return inf, inf, np.ones(n, dtype=bool)
        ratio = splats.alphas / self.cfg.min_alpha
        reach = ratio >= 1.0
        K = np.where(reach, 2.0 * np.log(np.maximum(ratio, 1.0)), 0.0)
        hx = np.sqrt(K * splats.covs[:, 0, 0])
        hy = np.sqrt(K * splats.covs[:, 1, 1])
        return hx, hy, reach

    def _bin(self, splats: SplatBatch, order: np.ndarray, cam: PinholeCamera) -> List[_Tile]:
        ts = self.cfg.tile_size
        n_tx = (cam.width + ts - 1) // ts
        n_ty = (cam.height + ts - 1) // ts
        hx, hy, reach = self._extents(splats)
        cx, cy = splats.centers[:, 0], splats.centers[:, 1]
        with np.errstate(invalid='ignore'):
            # one pixel of slack on each side; extra candidates are harmless
            col_lo = np.floor(cx - hx - 0.5) - 1
            col_hi = np.ceil(cx + hx - 0.5) + 1
            row_lo = np.floor(cy - hy - 0.5) - 1
            row_hi = np.ceil(cy + hy - 0.5) + 1
        tiles = []
        for ty in range(n_ty):
            r0, r1 = ty * ts, min((ty + 1) * ts, cam.height)
            for tx in range(n_tx):
                c0, c1 = tx * ts, min((tx + 1) * ts, cam.width)
                hit = reach & (col_hi >= c0) & (col_lo <= c1 - 1) & (row_hi >= r0) & (row_lo <= r1 - 1)
                tiles.append(_Tile(r0, r1, c0, c1, order[hit[order]]))
        return tiles

    # -- per-tile kernels -----------------------------------------------------

    def _terms(self, tile: _Tile, splats: SplatBatch, conics: np.ndarray):
        cfg = self.cfg
        ys, xs = np.mgrid[tile.row0:tile.row1, tile.col0:tile.col1]
        px = xs.reshape(-1) + 0.5
        py = ys.reshape(-1) + 0.5
        idx = tile.splats
        a, b, c = conics[idx, 0], conics[idx, 1], conics[idx, 2]
        dx = px[:, None] - splats.centers[idx, 0][None, :]
        dy = py[:, None] - splats.centers[idx, 1][None, :]
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        g = np.exp(power)
        raw = splats.alphas[idx][None, :] * g
        delta = np.minimum(raw, cfg.max_alpha)
        used = delta >= cfg.min_alpha
        one_minus = np.where(used, 1.0 - delta, 1.0)
        T_after = np.cumprod(one_minus, axis=1)
        included = used & (T_after >= cfg.min_transmittance)
        T_before = np.ones_like(T_after)
        T_before[:, 1:] = T_after[:, :-1]
        w = np.where(included, delta * T_before, 0.0)
        return {
            'idx': idx, 'dx': dx, 'dy': dy, 'g': g, 'raw': raw, 'delta': delta,
            'one_minus': one_minus, 'included': included, 'T_before': T_before, 'w': w,
            'abc': (a, b, c),
        }

    def _forward_tile(self, tile: _Tile, splats: SplatBatch, conics: np.ndarray):
        n_pix = (tile.row1 - tile.row0) * (tile.col1 - tile.col0)
        if len(tile.splats) == 0:
            return np.zeros((n_pix, 3)), np.ones(n_pix)
        t = self._terms(tile, splats, conics)
        color = t['w'] @ splats.colors[t['idx']]
        T_final = np.prod(np.where(t['included'], t['one_minus'], 1.0), axis=1)
        return color, T_final

    def _backward_tile(self, tile: _Tile, splats: SplatBatch, conics: np.ndarray, d_image: np.ndarray):
        if len(tile.splats) == 0:
            return None
        t = self._terms(tile, splats, conics)
        idx = t['idx']
        dC = d_image[tile.row0:tile.row1, tile.col0:tile.col1].reshape(-1, 3)
        colors = splats.colors[idx]
        w, included = t['w'], t['included']

        d_colors = w.T @ dC
        a_dot = dC @ colors.T
        contrib = a_dot * w
        suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        d_delta = np.where(included, a_dot * t['T_before'] - suffix / t['one_minus'], 0.0)

        linear = included & (t['raw'] < self.cfg.max_alpha)
        g = t['g']
        d_alphas = np.where(linear, d_delta * g, 0.0).sum(axis=0)
        d_power = np.where(linear, d_delta * splats.alphas[idx][None, :] * g, 0.0)
        a, b, c = t['abc']
        dx, dy = t['dx'], t['dy']
        d_centers = np.stack([(d_power * (a * dx + b * dy)).sum(axis=0),
                              (d_power * (b * dx + c * dy)).sum(axis=0)], axis=1)
        d_conic = np.stack([(d_power * (-0.5 * dx * dx)).sum(axis=0),
                            (d_power * (-0.5 * dx * dy)).sum(axis=0),
                            (d_power * (-0.5 * dy * dy)).sum(axis=0)], axis=1)
        return idx, d_colors, d_alphas, d_centers, d_conic

    def _map(self, fn, tiles):
        if self.cfg.workers > 1 and len(tiles) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                return list(pool.map(fn, tiles))
        return [fn(tile) for tile in tiles]

    # -- public API -----------------------------------------------------------

    def forward(self, splats: SplatBatch, cam: PinholeCamera) -> RenderResult:
        splats.validate()
        H, W = cam.height, cam.width
        image = np.zeros((H, W, 3))
        trans = np.ones((H, W))
        conics = splats.conics() if len(splats) else np.zeros((0, 3))
        order = depth_sort(splats.depths)
        tiles = self._bin(splats, order, cam)
        results = self._map(lambda tile: self._forward_tile(tile, splats, conics), tiles)
        for tile, (color, T_final) in zip(tiles, results):
            h, w = tile.row1 - tile.row0, tile.col1 - tile.col0
            image[tile.row0:tile.row1, tile.col0:tile.col1] = color.reshape(h, w, 3)
            trans[tile.row0:tile.row1, tile.col0:tile.col1] = T_final.reshape(h, w)
        self._cache = {'splats': splats, 'conics': conics, 'tiles': tiles, 'shape': (H, W, 3)}
        return RenderResult(image, trans)

    def backward(self, d_image: np.ndarray) -> SplatGrads:
        """Exact gradients of the clamped, terminated blend w.r.t. every splat"""
        if self._cache is None:
            raise UsageError("rasterize_backward called without a cached forward pass")
        if d_image.shape != self._cache['shape']:
            raise UsageError(f"upstream gradient has shape {d_image.shape}, "
                             f"forward rendered {self._cache['shape']}")
        splats, conics, tiles = self._cache['splats'], self._cache['conics'], self._cache['tiles']
        n = len(splats)
        grads = SplatGrads.zeros(n)
        d_conic = np.zeros((n, 3))
        partials = self._map(lambda tile: self._backward_tile(tile, splats, conics, d_image), tiles)
        # fixed tile order keeps the reduction deterministic for any worker count
        for part in partials:
            if part is None:
                continue
            idx, d_colors, d_alphas, d_centers, d_con = part
            grads.colors[idx] += d_colors
            grads.alphas[idx] += d_alphas
            grads.centers[idx] += d_centers
            d_conic[idx] += d_con

        if n:
            # conic = cov^-1 so dL/dcov = -conic @ G_conic @ conic
            Q = np.empty((n, 2, 2))
            Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = conics[:, 0], conics[:, 1], conics[:, 1], conics[:, 2]
            Gq = np.empty((n, 2, 2))
            Gq[:, 0, 0], Gq[:, 0, 1], Gq[:, 1, 0], Gq[:, 1, 1] = d_conic[:, 0], d_conic[:, 1], d_conic[:, 1], d_conic[:, 2]
            grads.covs = -Q @ Gq @ Q
        return grads


def rasterize(splats: SplatBatch, cam: PinholeCamera, cfg: RasterConfig = None,
              rasterizer: TileRasterizer = None) -> RenderResult:
    rasterizer = rasterizer or TileRasterizer(cfg)
    return rasterizer.forward(splats, cam)


def rasterize_backward(rasterizer: TileRasterizer, d_image: np.ndarray) -> SplatGrads:
    return rasterizer.backward(d_image)
