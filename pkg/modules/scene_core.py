"""
Scene Core Module
Anchor-based scene representation: voxelization of point clouds into fixed
anchors, incremental merging, and the growing/pruning refinement rules
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from modules.errors import ConfigError, RejectedInputError

logger = logging.getLogger(__name__)


@dataclass
class VoxelGridConfig:
    epsilon: float = 0.001

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon", f"voxel size must be positive, got {self.epsilon}")


@dataclass
class InitPolicy:
    """How fresh anchors are initialised (uniform ranges, offsets in voxel units)"""
    feature_range: float = 0.01
    offset_range: float = 0.5
    zero_offsets: bool = False


@dataclass
class RefinementConfig:
    epsilon_g: float = 0.001
    tau_g: float = 0.0002
    levels: int = 3
    window: int = 100
    prune_opacity: float = 0.005
    candidate_keep_prob: float = 0.5

    def __post_init__(self):
        if not self.epsilon_g > 0:
            raise ConfigError("epsilon_g", "must be positive")
        if not self.tau_g > 0:
            raise ConfigError("tau_g", "must be positive")
        if self.levels < 1:
            raise ConfigError("levels", "must be at least 1")
        if self.window < 1:
            raise ConfigError("window", "must be at least 1")
        if not 0 < self.prune_opacity < 1:
            raise ConfigError("prune_opacity", "must be within (0, 1)")
        if not 0 <= self.candidate_keep_prob <= 1:
            raise ConfigError("candidate_keep_prob", "must be within [0, 1]")


def lattice_keys(points: np.ndarray, epsilon: float) -> np.ndarray:
    """Integer lattice coordinates round(p / epsilon), halves rounded away from zero"""
    scaled = np.asarray(points, dtype=np.float64) / epsilon
    return (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).astype(np.int64)


def _check_cloud(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise RejectedInputError("point cloud contains non-finite coordinates")
    return points


def _unique_keys(keys: np.ndarray) -> np.ndarray:
    """Unique rows kept in order of first occurrence"""
    if len(keys) == 0:
        return keys.reshape(0, 3)
    _, first = np.unique(keys, axis=0, return_index=True)
    return keys[np.sort(first)]


def voxelize(cloud, cfg: VoxelGridConfig) -> np.ndarray:
    """Voxel centers round(p / eps) * eps of a cloud, without duplicates"""
    points = _check_cloud(cloud)
    keys = _unique_keys(lattice_keys(points, cfg.epsilon))
    return keys.astype(np.float64) * cfg.epsilon


class LatticeMap:
    """Occupancy of integer lattice cells at one voxel size"""

    def __init__(self, epsilon: float, centers: Optional[np.ndarray] = None):
        self.epsilon = epsilon
        self.cells = set()
        if centers is not None and len(centers):
            self.add_keys(lattice_keys(centers, epsilon))

    def add_keys(self, keys: np.ndarray) -> None:
        self.cells.update(map(tuple, keys.tolist()))

    def contains(self, keys: np.ndarray) -> np.ndarray:
        return np.array([tuple(k) in self.cells for k in keys.tolist()], dtype=bool)

    def __len__(self):
        return len(self.cells)


@dataclass
class Anchor:
    """Read-only view of one anchor"""
    center: np.ndarray
    feature: np.ndarray
    scale: np.ndarray
    offsets: np.ndarray
    active: bool = True


class AnchorSet:
    """Struct-of-arrays storage for N anchors with k offsets each.

    Centers are stored read-only; the optimizer only ever sees features,
    offsets and log_scale. Scales are kept as natural logs so they stay
    positive under unconstrained updates.
    """

    def __init__(self, centers: np.ndarray, features: np.ndarray,
                 offsets: np.ndarray, log_scale: np.ndarray):
        centers = np.array(centers, dtype=np.float64).reshape(-1, 3)
        centers.flags.writeable = False
        self.centers = centers
        self.features = np.asarray(features, dtype=np.float64)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        self.log_scale = np.asarray(log_scale, dtype=np.float64)
        n = len(centers)
        if self.features.shape[0] != n or self.offsets.shape[0] != n or self.log_scale.shape != (n, 3):
            raise RejectedInputError("anchor arrays disagree in length")
        if self.offsets.ndim != 3 or self.offsets.shape[2] != 3:
            raise RejectedInputError("offsets must have shape (N, k, 3)")

    @classmethod
    def empty(cls, k: int, feature_dim: int) -> "AnchorSet":
        return cls(np.zeros((0, 3)), np.zeros((0, feature_dim)),
                   np.zeros((0, k, 3)), np.zeros((0, 3)))

    def __len__(self):
        return len(self.centers)

    def __getitem__(self, i: int) -> Anchor:
        return Anchor(self.centers[i], self.features[i], self.scale[i], self.offsets[i])

    @property
    def k(self) -> int:
        return self.offsets.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def copy(self) -> "AnchorSet":
        return AnchorSet(self.centers, self.features.copy(), self.offsets.copy(), self.log_scale.copy())

    def subset(self, mask: np.ndarray) -> "AnchorSet":
        return AnchorSet(self.centers[mask], self.features[mask],
                         self.offsets[mask], self.log_scale[mask])

    def concat(self, other: "AnchorSet") -> "AnchorSet":
        if len(other) == 0:
            return self.copy()
        return AnchorSet(np.concatenate([self.centers, other.centers]),
                         np.concatenate([self.features, other.features]),
                         np.concatenate([self.offsets, other.offsets]),
                         np.concatenate([self.log_scale, other.log_scale]))


def init_anchors(centers: np.ndarray, k: int = 10, feature_dim: int = 32,
                 init: InitPolicy = None, rng: np.random.Generator = None,
                 voxel_size: float = 0.001) -> AnchorSet:
    """One anchor per center; scale starts at the voxel size on every axis"""
    if k < 1:
        raise ConfigError("k", "each anchor needs at least one offset")
    init = init or InitPolicy()
    rng = rng if rng is not None else np.random.default_rng(0)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    n = len(centers)
    features = rng.uniform(-init.feature_range, init.feature_range, size=(n, feature_dim))
    if init.zero_offsets:
        offsets = np.zeros((n, k, 3))
    else:
        offsets = rng.uniform(-init.offset_range, init.offset_range, size=(n, k, 3))
    log_scale = np.full((n, 3), np.log(voxel_size))
    return AnchorSet(centers, features, offsets, log_scale)


def merge_new_keyframe_anchors(existing: AnchorSet, new_cloud, cfg: VoxelGridConfig,
                               init: InitPolicy = None,
                               rng: np.random.Generator = None) -> AnchorSet:
    """Add anchors only at voxel centers that are not yet occupied"""
    points = _check_cloud(new_cloud)
    keys = _unique_keys(lattice_keys(points, cfg.epsilon))
    occupied = LatticeMap(cfg.epsilon, existing.centers)
    fresh = keys[~occupied.contains(keys)] if len(keys) else keys
    if len(fresh) == 0:
        return existing.copy()
    added = init_anchors(fresh.astype(np.float64) * cfg.epsilon, existing.k,
                         existing.feature_dim, init, rng, cfg.epsilon)
    logger.debug("merged %d new anchors (%d already occupied)", len(added), len(keys) - len(fresh))
    return existing.concat(added)


class AnchorStats:
    """Refinement statistics accumulated over one refinement window.

    Per anchor: summed mean child opacity and the number of iterations the
    anchor was observed. Per child Gaussian: summed norm of the screen-space
    position gradient and how many iterations it was rendered.
    """

    def __init__(self, n_anchors: int, k: int):
        self.opacity_accum = np.zeros(n_anchors)
        self.sample_count = np.zeros(n_anchors, dtype=np.int64)
        self.gaussian_grad_accum = np.zeros((n_anchors, k))
        self.gaussian_count = np.zeros((n_anchors, k), dtype=np.int64)

    @property
    def grad_accum(self) -> np.ndarray:
        return self.gaussian_grad_accum.sum(axis=1)

    def accumulate(self, observed: np.ndarray, opacity: np.ndarray,
                   rendered: np.ndarray, grad_norm: np.ndarray) -> None:
        """Record one iteration.

        observed (N,) anchors seen by the view; opacity (N, k) clamped decoded
        opacities; rendered (N, k) children that reached the rasterizer;
        grad_norm (N, k) screen-space gradient norms (ignored where not rendered).
        """
        self.opacity_accum[observed] += opacity[observed].mean(axis=1)
        self.sample_count[observed] += 1
        self.gaussian_grad_accum[rendered] += grad_norm[rendered]
        self.gaussian_count[rendered] += 1

    def mean_gaussian_grad(self) -> np.ndarray:
        out = np.zeros_like(self.gaussian_grad_accum)
        seen = self.gaussian_count > 0
        out[seen] = self.gaussian_grad_accum[seen] / self.gaussian_count[seen]
        return out

    def reset_gradients(self) -> None:
        self.gaussian_grad_accum[:] = 0.0
        self.gaussian_count[:] = 0

    def reset_opacity(self) -> None:
        self.opacity_accum[:] = 0.0
        self.sample_count[:] = 0

    def extend(self, n_new: int) -> None:
        k = self.gaussian_count.shape[1]
        self.opacity_accum = np.concatenate([self.opacity_accum, np.zeros(n_new)])
        self.sample_count = np.concatenate([self.sample_count, np.zeros(n_new, dtype=np.int64)])
        self.gaussian_grad_accum = np.concatenate([self.gaussian_grad_accum, np.zeros((n_new, k))])
        self.gaussian_count = np.concatenate([self.gaussian_count, np.zeros((n_new, k), dtype=np.int64)])

    def keep(self, mask: np.ndarray) -> None:
        self.opacity_accum = self.opacity_accum[mask]
        self.sample_count = self.sample_count[mask]
        self.gaussian_grad_accum = self.gaussian_grad_accum[mask]
        self.gaussian_count = self.gaussian_count[mask]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {
            'opacity_accum': self.opacity_accum,
            'sample_count': self.sample_count,
            'gaussian_grad_accum': self.gaussian_grad_accum,
            'gaussian_count': self.gaussian_count,
        }


def grow_anchors(anchors: AnchorSet, positions: np.ndarray, stats: AnchorStats,
                 cfg: RefinementConfig, rng: np.random.Generator) -> AnchorSet:
    """New anchors at the centers of high-gradient grow voxels.

    positions (N, k, 3) are the current decoded child positions. For every
    level m the grow voxel shrinks by 4 and the threshold doubles. A voxel is a
    candidate when the mean over its rendered children of their window-mean
    gradient exceeds the level threshold; candidates hitting occupied cells are
    dropped and the rest survive with probability candidate_keep_prob.
    Gradient accumulators are reset afterwards.
    """
    mean_grad = stats.mean_gaussian_grad().reshape(-1)
    seen = stats.gaussian_count.reshape(-1) > 0
    flat_pos = positions.reshape(-1, 3)[seen]
    flat_grad = mean_grad[seen]
    parent = np.repeat(np.arange(len(anchors)), anchors.k)[seen]

    new_centers, new_features, new_log_scale = [], [], []
    for level in range(1, cfg.levels + 1):
        eps_m = cfg.epsilon_g / 4 ** (level - 1)
        tau_m = cfg.tau_g * 2 ** (level - 1)
        if len(flat_pos) == 0:
            break
        keys = lattice_keys(flat_pos, eps_m)
        cells, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        voxel_sum = np.bincount(inverse, weights=flat_grad, minlength=len(cells))
        voxel_n = np.bincount(inverse, minlength=len(cells))
        candidate = voxel_sum / voxel_n > tau_m

        occupied = LatticeMap(eps_m, anchors.centers)
        for centers in new_centers:
            occupied.add_keys(lattice_keys(centers, eps_m))
        candidate &= ~occupied.contains(cells)
        # one draw per voxel in sorted-cell order keeps runs reproducible
        draws = rng.random(len(cells))
        candidate &= draws < cfg.candidate_keep_prob
        chosen = np.flatnonzero(candidate)
        if len(chosen) == 0:
            continue

        feats = np.full((len(cells), anchors.feature_dim), -np.inf)
        np.maximum.at(feats, inverse, anchors.features[parent])
        new_centers.append(cells[chosen].astype(np.float64) * eps_m)
        new_features.append(feats[chosen])
        new_log_scale.append(np.full((len(chosen), 3), np.log(eps_m)))
        logger.debug("grow level %d: %d new anchors (eps=%g, tau=%g)", level, len(chosen), eps_m, tau_m)

    stats.reset_gradients()
    if not new_centers:
        return AnchorSet.empty(anchors.k, anchors.feature_dim)
    centers = np.concatenate(new_centers)
    return AnchorSet(centers, np.concatenate(new_features),
                     np.zeros((len(centers), anchors.k, 3)), np.concatenate(new_log_scale))


def prune_mask(stats: AnchorStats, cfg: RefinementConfig) -> np.ndarray:
    """Boolean keep-mask; anchors never observed in the window are kept"""
    keep = np.ones(len(stats.sample_count), dtype=bool)
    seen = stats.sample_count > 0
    mean_opacity = stats.opacity_accum[seen] / stats.sample_count[seen]
    keep[seen] = ~(mean_opacity < cfg.prune_opacity)
    return keep


def prune_anchors(anchors: AnchorSet, stats: AnchorStats,
                  cfg: RefinementConfig) -> Tuple[AnchorSet, np.ndarray]:
    """Drop anchors whose mean opacity over the window is below prune_opacity.

    Returns the surviving anchors and the keep-mask; stats are shrunk to the
    survivors and their opacity accumulators reset.
    """
    keep = prune_mask(stats, cfg)
    stats.keep(keep)
    stats.reset_opacity()
    if not keep.all():
        logger.debug("pruned %d of %d anchors", int((~keep).sum()), len(keep))
    return anchors.subset(keep), keep
