"""
Trainer Module
Keyframe-driven optimization loop: decode, project, rasterize, loss, backward,
Adam update, anchor refinement, checkpoints and evaluation
"""

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from modules.camera import CameraPose, PinholeCamera
from modules.datakit import Dataset, Frame
from modules.decoders import AnchorDecoder, AnchorGrads, GaussianGrads, decode_positions_batch
from modules.errors import ConfigError, ParseError, RejectedInputError
from modules.losses import FrequencyPyramidConfig, LossBreakdown, LossWeights, psnr, ssim, total_loss
from modules.rasterizer import (RasterConfig, TileRasterizer, project_backward,
                                project_gaussians)
from modules.scene_core import (AnchorSet, AnchorStats, InitPolicy, RefinementConfig,
                                VoxelGridConfig, grow_anchors, init_anchors,
                                merge_new_keyframe_anchors, prune_anchors, voxelize)
from modules.system_monitor import ResourceMonitor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SPLMCKPT"
CHECKPOINT_VERSION = 1
METRICS_VERSION = 1
ANCHOR_GROUPS = ('features', 'offsets', 'log_scale')


@dataclass
class LearningRates:
    features: float = 0.0075
    offsets: float = 0.01
    offsets_final: float = 0.0001
    log_scale: float = 0.007
    mlp: float = 0.002
    appearance: float = 0.002

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f.name, "learning rates must be non-negative")

    def offsets_at(self, iteration: int, total: int) -> float:
        """Exponential decay from offsets to offsets_final over the run"""
        if self.offsets == 0.0 or self.offsets_final == 0.0:
            return self.offsets
        frac = min(max(iteration / max(total, 1), 0.0), 1.0)
        return self.offsets * (self.offsets_final / self.offsets) ** frac


@dataclass
class TrainConfig:
    iterations: int = 30000
    k: int = 10
    n_appearance: int = 32
    epsilon: float = 0.001
    feature_dim: int = 32
    hidden: int = 32
    appearance_mode: str = "afme"
    afme_hidden: bool = False
    init_mode: str = "voxel"
    random_anchor_count: int = 0
    incremental: bool = False
    refine_start: int = 500
    refine_end: int = 15000
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-15
    loss: LossWeights = field(default_factory=LossWeights)
    fpr: FrequencyPyramidConfig = field(default_factory=FrequencyPyramidConfig)
    refine: RefinementConfig = field(default_factory=RefinementConfig)
    lr: LearningRates = field(default_factory=LearningRates)
    init: InitPolicy = field(default_factory=InitPolicy)

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations", "must be non-negative")
        for name in ('k', 'feature_dim', 'hidden'):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be positive")
        if self.n_appearance < 0:
            raise ConfigError("n_appearance", "must be non-negative")
        if not self.epsilon > 0:
            raise ConfigError("epsilon", "voxel size must be positive")
        if self.init_mode not in ("voxel", "random"):
            raise ConfigError("init_mode", f"unknown mode '{self.init_mode}'")
        if self.appearance_mode not in ("afme", "ae", "none"):
            raise ConfigError("appearance_mode", f"unknown mode '{self.appearance_mode}'")
        self.betas = (float(self.betas[0]), float(self.betas[1]))

    def to_dict(self) -> dict:
        data = asdict(self)
        data['betas'] = list(self.betas)
        data['fpr']['active_window'] = list(self.fpr.active_window)
        return data

    @classmethod
    def from_dict(cls, data: dict, path: str = "train") -> "TrainConfig":
        return build_dataclass(cls, data, path)


def build_dataclass(cls, data, path: str):
    """Construct a (nested) config dataclass, rejecting unknown keys by path"""
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown key")
    kwargs = {}
    for name, value in data.items():
        ftype = known[name].type
        if is_dataclass(ftype) and isinstance(ftype, type):
            kwargs[name] = build_dataclass(ftype, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError as e:
        if e.key_path.startswith(path):
            raise
        raise ConfigError(f"{path}.{e.key_path}", e.message) from None
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e)) from None


@dataclass
class Keyframe:
    id: int
    image: np.ndarray
    pose: CameraPose
    cloud: np.ndarray

    def __post_init__(self):
        self.pose.validate(tol=1e-6)
        if not np.all(np.isfinite(self.image)):
            raise RejectedInputError(f"keyframe {self.id} image contains non-finite values")


@dataclass
class LossRecord:
    iteration: int
    l1: float
    ssim: float
    vol: float
    hf: float
    total: float
    n_gaussians: int

    def as_row(self) -> list:
        return [self.iteration, self.l1, self.ssim, self.vol, self.hf, self.total]


class Adam:
    """Adam with per-group step counts; anchor-group moments follow grow/prune"""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-15):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: Dict[str, List[np.ndarray]] = {}
        self.v: Dict[str, List[np.ndarray]] = {}
        self.steps: Dict[str, int] = {}

    def register(self, name: str, params: Sequence[np.ndarray]) -> None:
        self.m[name] = [np.zeros_like(p) for p in params]
        self.v[name] = [np.zeros_like(p) for p in params]
        self.steps[name] = 0

    def step(self, name: str, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
        self.steps[name] += 1
        t = self.steps[name]
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self.m[name], self.v[name]):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr != 0.0:
                p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def extend(self, name: str, n_new: int) -> None:
        for store in (self.m, self.v):
            store[name] = [np.concatenate([a, np.zeros((n_new,) + a.shape[1:])]) for a in store[name]]

    def keep(self, name: str, mask: np.ndarray) -> None:
        for store in (self.m, self.v):
            store[name] = [a[mask] for a in store[name]]


@dataclass
class TrainState:
    cfg: TrainConfig
    anchors: AnchorSet
    decoder: AnchorDecoder
    stats: AnchorStats
    optimizer: Adam
    camera: PinholeCamera
    raster: RasterConfig
    iteration: int = 0
    merged_keyframes: int = 0
    rasterizer: TileRasterizer = None

    def __post_init__(self):
        if self.rasterizer is None:
            self.rasterizer = TileRasterizer(self.raster)

    def mlp_groups(self) -> Dict[str, list]:
        return {name: mlp.params for name, mlp in self.decoder.mlps().items()}


def make_optimizer(cfg: TrainConfig, anchors: AnchorSet, decoder: AnchorDecoder) -> Adam:
    opt = Adam(cfg.betas, cfg.adam_eps)
    for name in ANCHOR_GROUPS:
        opt.register(name, [getattr(anchors, name)])
    for name, mlp in decoder.mlps().items():
        opt.register(name, mlp.params)
    return opt


# ---------------------------------------------------------------------------
# data split
# ---------------------------------------------------------------------------

class CovisibilityRule:
    """A frame becomes a keyframe when it shares less than max_shared of its
    visible cloud points with the previous keyframe"""

    def __init__(self, cloud: np.ndarray, camera: PinholeCamera, max_shared: float = 0.9):
        self.cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
        self.camera = camera
        self.max_shared = max_shared

    def visible(self, pose: CameraPose) -> np.ndarray:
        p = pose.transform(self.cloud)
        z = p[:, 2]
        ok = z > 0
        u = np.where(ok, self.camera.fx * p[:, 0] / np.where(ok, z, 1.0) + self.camera.cx, -1.0)
        v = np.where(ok, self.camera.fy * p[:, 1] / np.where(ok, z, 1.0) + self.camera.cy, -1.0)
        return ok & (u >= 0) & (u < self.camera.width) & (v >= 0) & (v < self.camera.height)

    def __call__(self, frames: Sequence[Frame]) -> np.ndarray:
        flags = np.zeros(len(frames), dtype=bool)
        flags[0] = True
        last = self.visible(frames[0].pose)
        for i in range(1, len(frames)):
            seen = self.visible(frames[i].pose)
            n_seen = int(seen.sum())
            shared = int((seen & last).sum()) / n_seen if n_seen else 1.0
            if shared < self.max_shared:
                flags[i] = True
                last = seen
        return flags


KeyframeRule = Union[None, int, Sequence[int], Callable[[Sequence[Frame]], np.ndarray]]


def split_train_test(frames: Sequence[Frame], keyframe_rule: KeyframeRule = None) -> Tuple[List[Frame], List[Frame]]:
    """Keyframes go to training, the rest to test.

    keyframe_rule: None uses the frames' own keyframe flags, an int n selects
    every n-th frame, a sequence lists frame positions, a callable returns flags.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise RejectedInputError("need at least 2 frames to split")
    if keyframe_rule is None:
        flags = np.array([f.is_keyframe for f in frames])
    elif isinstance(keyframe_rule, (int, np.integer)) and not isinstance(keyframe_rule, bool):
        if keyframe_rule < 1:
            raise ConfigError("data.keyframe_every", "must be at least 1")
        flags = np.arange(len(frames)) % keyframe_rule == 0
    elif callable(keyframe_rule):
        flags = np.asarray(keyframe_rule(frames), dtype=bool)
    else:
        flags = np.zeros(len(frames), dtype=bool)
        flags[list(keyframe_rule)] = True
    if flags.all() or not flags.any():
        raise RejectedInputError(f"keyframe rule selected {int(flags.sum())} of {len(frames)} frames; "
                                 f"both splits must be non-empty")
    train = [f for f, k in zip(frames, flags) if k]
    test = [f for f, k in zip(frames, flags) if not k]
    return train, test


def keyframes_from(dataset: Dataset, train_frames: Sequence[Frame]) -> List[Keyframe]:
    return [Keyframe(f.index, f.image, f.pose, dataset.keyframe_cloud(f.index)) for f in train_frames]


# ---------------------------------------------------------------------------
# state construction
# ---------------------------------------------------------------------------

def initial_centers(cfg: TrainConfig, keyframes: Sequence[Keyframe], bounds: Optional[dict] = None) -> np.ndarray:
    voxel = VoxelGridConfig(cfg.epsilon)
    clouds = [keyframes[0].cloud] if cfg.incremental else [kf.cloud for kf in keyframes]
    cloud = np.concatenate([c.reshape(-1, 3) for c in clouds]) if clouds else np.zeros((0, 3))
    if cfg.init_mode == "voxel":
        return voxelize(cloud, voxel)

    count = cfg.random_anchor_count or len(voxelize(cloud, voxel)) or 1000
    if bounds is not None:
        lo, hi = np.asarray(bounds['min'], dtype=np.float64), np.asarray(bounds['max'], dtype=np.float64)
    elif len(cloud):
        lo, hi = cloud.min(axis=0), cloud.max(axis=0)
    else:
        lo, hi = -np.ones(3), np.ones(3)
    rng = np.random.default_rng([cfg.seed, 6])
    return rng.uniform(lo, hi, size=(count, 3))


def init_state(cfg: TrainConfig, keyframes: Sequence[Keyframe], camera: PinholeCamera,
               raster: RasterConfig = None, bounds: Optional[dict] = None) -> TrainState:
    if not keyframes:
        raise RejectedInputError("training needs at least one keyframe")
    centers = initial_centers(cfg, keyframes, bounds)
    anchors = init_anchors(centers, cfg.k, cfg.feature_dim, cfg.init,
                           np.random.default_rng([cfg.seed, 0]), cfg.epsilon)
    decoder = AnchorDecoder(cfg.k, cfg.feature_dim, cfg.hidden, cfg.n_appearance,
                            cfg.appearance_mode, cfg.afme_hidden, len(keyframes),
                            np.random.default_rng([cfg.seed, 4]))
    state = TrainState(cfg, anchors, decoder, AnchorStats(len(anchors), cfg.k),
                       make_optimizer(cfg, anchors, decoder), camera, raster or RasterConfig(),
                       merged_keyframes=1 if cfg.incremental else len(keyframes))
    logger.info(f"Initialised {len(anchors)} anchors ({cfg.init_mode}, epsilon={cfg.epsilon})")
    return state


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _observed_anchors(centers: np.ndarray, pose: CameraPose, cam: PinholeCamera, near: float) -> np.ndarray:
    p = pose.transform(centers)
    z = p[:, 2]
    front = z > near
    safe = np.where(front, z, 1.0)
    u = cam.fx * p[:, 0] / safe + cam.cx
    v = cam.fy * p[:, 1] / safe + cam.cy
    return front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)


def render_view(state: TrainState, pose: CameraPose, view_index: Optional[int] = None) -> np.ndarray:
    """Inference render; leaves every training cache untouched"""
    dec = state.decoder
    batch = dec.decode(state.anchors, pose, dec.embed(pose, view_index, cache=False), cache=False)
    active = batch.active
    proj = project_gaussians(batch.mu[active], batch.quat[active], batch.scale[active],
                             batch.color[active], batch.alpha[active], pose, state.camera, state.raster)
    return TileRasterizer(state.raster).forward(proj.splats, state.camera).image


@dataclass
class StepGradients:
    """Everything one forward/backward pass produces before the optimizer runs"""
    loss: LossBreakdown
    anchors: AnchorGrads
    alpha: np.ndarray      # (N, k) decoded opacities
    rendered: np.ndarray   # (N, k) children that reached the rasterizer
    grad_norm: np.ndarray  # (N, k) screen-space center gradient norms


def view_loss(state: TrainState, keyframe: Keyframe, view_index: Optional[int] = None,
              iteration: Optional[int] = None) -> LossBreakdown:
    """Cache-free loss of one keyframe; the scalar that forward_backward differentiates"""
    cfg, dec = state.cfg, state.decoder
    batch = dec.decode(state.anchors, keyframe.pose, dec.embed(keyframe.pose, view_index, cache=False),
                       cache=False)
    active = batch.active
    proj = project_gaussians(batch.mu[active], batch.quat[active], batch.scale[active],
                             batch.color[active], batch.alpha[active], keyframe.pose, state.camera,
                             state.raster)
    render = TileRasterizer(state.raster).forward(proj.splats, state.camera)
    return total_loss(render.image, keyframe.image, batch.scale[active], cfg.loss, cfg.fpr, iteration)


def forward_backward(state: TrainState, keyframe: Keyframe, view_index: Optional[int] = None,
                     iteration: Optional[int] = None) -> StepGradients:
    """Render one keyframe and chain the loss gradient back to anchors and MLPs.

    MLP gradients are left in each Mlp.grads; anchor gradients are returned.
    """
    cfg, dec, cam = state.cfg, state.decoder, state.camera
    n, k = len(state.anchors), cfg.k
    dec.zero_grad()

    embedding = dec.embed(keyframe.pose, view_index)
    batch = dec.decode(state.anchors, keyframe.pose, embedding)
    active = batch.active
    ai, ci = np.nonzero(active)
    proj = project_gaussians(batch.mu[active], batch.quat[active], batch.scale[active],
                             batch.color[active], batch.alpha[active], keyframe.pose, cam, state.raster)
    vis = proj.visible
    render = state.rasterizer.forward(proj.splats, cam)
    loss = total_loss(render.image, keyframe.image, batch.scale[active], cfg.loss, cfg.fpr, iteration)

    splat_grads = state.rasterizer.backward(loss.grad_image)
    d_mu, d_quat, d_scale = project_backward(proj, splat_grads, keyframe.pose, cam)
    d_scale += loss.grad_scales
    grads = GaussianGrads.zeros(n, k)
    grads.mu[ai, ci] = d_mu
    grads.quat[ai, ci] = d_quat
    grads.scale[ai, ci] = d_scale
    d_color = np.zeros((len(ai), 3))
    d_color[vis] = splat_grads.colors
    grads.color[ai, ci] = d_color
    d_alpha = np.zeros(len(ai))
    d_alpha[vis] = splat_grads.alphas
    grads.alpha[ai, ci] = d_alpha

    rendered = np.zeros((n, k), dtype=bool)
    rendered[ai[vis], ci[vis]] = True
    grad_norm = np.zeros((n, k))
    grad_norm[ai[vis], ci[vis]] = np.linalg.norm(splat_grads.centers, axis=1)
    return StepGradients(loss, dec.backward(grads), batch.alpha, rendered, grad_norm)


def train_step(state: TrainState, keyframe: Keyframe, view_index: Optional[int] = None) -> LossRecord:
    """One render/loss/backward/update cycle on a single keyframe"""
    cfg, dec = state.cfg, state.decoder
    iteration = state.iteration + 1
    anchors = state.anchors
    step = forward_backward(state, keyframe, view_index, iteration)
    anchor_grads = step.anchors

    if cfg.refine_start - cfg.refine.window < iteration <= cfg.refine_end:
        observed = _observed_anchors(anchors.centers, keyframe.pose, state.camera, state.raster.near)
        state.stats.accumulate(observed, np.maximum(step.alpha, 0.0), step.rendered, step.grad_norm)

    lr = cfg.lr
    opt = state.optimizer
    opt.step('features', [anchors.features], [anchor_grads.features], lr.features)
    opt.step('offsets', [anchors.offsets], [anchor_grads.offsets], lr.offsets_at(iteration, cfg.iterations))
    opt.step('log_scale', [anchors.log_scale], [anchor_grads.log_scale], lr.log_scale)
    for name, mlp in dec.mlps().items():
        opt.step(name, mlp.params, mlp.grads, lr.appearance if name == 'appearance' else lr.mlp)

    state.iteration = iteration
    loss = step.loss
    return LossRecord(iteration, loss.l1, loss.ssim, loss.vol, loss.hf, loss.total, int(step.rendered.sum()))


def refine(state: TrainState) -> Tuple[int, int]:
    """Grow then prune; returns (grown, pruned)"""
    cfg, anchors = state.cfg, state.anchors
    positions = decode_positions_batch(anchors.centers, anchors.offsets, anchors.scale)
    rng = np.random.default_rng([cfg.seed, 1, state.iteration])
    new = grow_anchors(anchors, positions, state.stats, cfg.refine, rng)
    if len(new):
        state.anchors = anchors.concat(new)
        state.stats.extend(len(new))
        for name in ANCHOR_GROUPS:
            state.optimizer.extend(name, len(new))
    state.anchors, keep = prune_anchors(state.anchors, state.stats, cfg.refine)
    if not keep.all():
        for name in ANCHOR_GROUPS:
            state.optimizer.keep(name, keep)
    return len(new), int((~keep).sum())


def merge_keyframe(state: TrainState, keyframe: Keyframe) -> int:
    before = len(state.anchors)
    rng = np.random.default_rng([state.cfg.seed, 2, state.merged_keyframes])
    state.anchors = merge_new_keyframe_anchors(state.anchors, keyframe.cloud,
                                               VoxelGridConfig(state.cfg.epsilon), state.cfg.init, rng)
    added = len(state.anchors) - before
    if added:
        state.stats.extend(added)
        for name in ANCHOR_GROUPS:
            state.optimizer.extend(name, added)
    state.merged_keyframes += 1
    return added


def _sample(cfg: TrainConfig, step_index: int, n_keyframes: int) -> int:
    epoch, position = divmod(step_index, n_keyframes)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n_keyframes)
    return int(order[position])


def evaluate(state: TrainState, frames: Sequence[Frame], view_indices: Sequence[Optional[int]] = None) -> Dict:
    if not frames:
        return {'psnr': None, 'ssim': None, 'count': 0}
    view_indices = view_indices or [None] * len(frames)
    psnrs, ssims = [], []
    for frame, vi in zip(frames, view_indices):
        image = render_view(state, frame.pose, vi)
        psnrs.append(psnr(image, frame.image))
        ssims.append(ssim(image, frame.image))
    mean_psnr = float(np.mean(psnrs))
    return {'psnr': mean_psnr if math.isfinite(mean_psnr) else None,
            'ssim': float(np.mean(ssims)), 'count': len(frames)}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _checkpoint_arrays(state: TrainState) -> List[Tuple[str, np.ndarray]]:
    arrays = [('centers', state.anchors.centers), ('features', state.anchors.features),
              ('offsets', state.anchors.offsets), ('log_scale', state.anchors.log_scale)]
    for name, mlp in state.decoder.mlps().items():
        arrays += [(f"{name}.{i}", p) for i, p in enumerate(mlp.params)]
    opt = state.optimizer
    for name in opt.m:
        arrays += [(f"adam.m.{name}.{i}", a) for i, a in enumerate(opt.m[name])]
        arrays += [(f"adam.v.{name}.{i}", a) for i, a in enumerate(opt.v[name])]
    arrays += [(f"stats.{name}", a) for name, a in state.stats.arrays().items()]
    return arrays


def save_checkpoint(state: TrainState, path) -> None:
    """Little-endian binary: magic, version, header length, JSON header, float64 arrays"""
    arrays = _checkpoint_arrays(state)
    header = {
        'iteration': state.iteration,
        'merged_keyframes': state.merged_keyframes,
        'n_anchors': len(state.anchors),
        'n_views': state.decoder.appearance.mlp.dims[0] if state.decoder.appearance_mode == 'ae' else 0,
        'camera': state.camera.to_dict(),
        'raster': asdict(state.raster),
        'config': state.cfg.to_dict(),
        'adam_steps': state.optimizer.steps,
        'arrays': [[name, list(a.shape)] for name, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(struct.pack('<8sII', CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype='<f8').tobytes())


def load_checkpoint(path) -> TrainState:
    data = Path(path).read_bytes()
    prefix = struct.calcsize('<8sII')
    if len(data) < prefix:
        raise ParseError(path, "file too short for a checkpoint header")
    magic, version, size = struct.unpack_from('<8sII', data)
    if magic != CHECKPOINT_MAGIC:
        raise ParseError(path, "not a checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise ParseError(path, f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[prefix:prefix + size].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(path, f"corrupt header ({e})")

    offset = prefix + size
    arrays = {}
    for name, shape in header['arrays']:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ParseError(path, f"truncated while reading '{name}' at byte {offset}")
        arrays[name] = np.frombuffer(data, dtype='<f8', count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = end

    cfg = TrainConfig.from_dict(header['config'])
    anchors = AnchorSet(arrays['centers'], arrays['features'], arrays['offsets'], arrays['log_scale'])
    decoder = AnchorDecoder(cfg.k, cfg.feature_dim, cfg.hidden, cfg.n_appearance, cfg.appearance_mode,
                            cfg.afme_hidden, max(header['n_views'], 1))
    for name, mlp in decoder.mlps().items():
        for i in range(len(mlp.params)):
            mlp.params[i][...] = arrays[f"{name}.{i}"]
    opt = make_optimizer(cfg, anchors, decoder)
    for name in opt.m:
        opt.m[name] = [arrays[f"adam.m.{name}.{i}"] for i in range(len(opt.m[name]))]
        opt.v[name] = [arrays[f"adam.v.{name}.{i}"] for i in range(len(opt.v[name]))]
        opt.steps[name] = int(header['adam_steps'][name])
    stats = AnchorStats(len(anchors), cfg.k)
    stats.opacity_accum = arrays['stats.opacity_accum']
    stats.sample_count = arrays['stats.sample_count'].astype(np.int64)
    stats.gaussian_grad_accum = arrays['stats.gaussian_grad_accum']
    stats.gaussian_count = arrays['stats.gaussian_count'].astype(np.int64)
    return TrainState(cfg, anchors, decoder, stats, opt, PinholeCamera.from_dict(header['camera']),
                      RasterConfig(**header['raster']), header['iteration'], header['merged_keyframes'])


# ---------------------------------------------------------------------------
# artefacts and the main loop
# ---------------------------------------------------------------------------

def write_loss_csv(path, records: Sequence[LossRecord]) -> None:
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['iter', 'l1', 'ssim', 'vol', 'hf', 'total'])
        for rec in records:
            writer.writerow([rec.iteration] + [repr(float(v)) for v in rec.as_row()[1:]])


def plot_loss(path, records: Sequence[LossRecord]) -> bool:
    """Write the loss curve; returns False when matplotlib is unavailable"""
    try:
        import matplotlib
        matplotlib.use('Agg')
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning(f"matplotlib not installed, skipping {path}")
        return False

    fig, ax = plt.subplots(figsize=(6, 4))
    its = [r.iteration for r in records]
    ax.plot(its, [r.total for r in records], label='total')
    ax.plot(its, [r.l1 for r in records], label='l1', alpha=0.7)
    ax.set_xlabel('iteration')
    ax.set_ylabel('loss')
    ax.set_yscale('log')
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return True


def run(cfg: TrainConfig, dataset: Dataset, out_dir=None, raster: RasterConfig = None,
        resume=None, keyframe_rule: KeyframeRule = None, progress: bool = True,
        stop_at: Optional[int] = None) -> Dict:
    """Train end to end and write checkpoint.bin, loss.csv, metrics.json and loss.png.

    stop_at ends the loop early (used to simulate an interrupted run); the
    learning-rate schedule still follows cfg.iterations.
    """
    result = {'status': 'pending', 'metrics': {}, 'state': None, 'records': [], 'errors': []}
    monitor = ResourceMonitor(workers=(raster or RasterConfig()).workers)
    started = time.time()

    train_frames, test_frames = split_train_test(dataset.frames, keyframe_rule)
    keyframes = keyframes_from(dataset, train_frames)
    if resume is not None:
        state = load_checkpoint(resume)
        state.cfg = cfg
        logger.info(f"Resumed from {resume} at iteration {state.iteration}")
    else:
        state = init_state(cfg, keyframes, dataset.camera, raster, dataset.meta.get('bounds'))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    records = []
    bar = tqdm(total=end - state.iteration, disable=not progress, desc="train", unit="it")
    try:
        while state.iteration < end:
            step_index = state.iteration
            if cfg.incremental and step_index % len(keyframes) == 0:
                epoch = step_index // len(keyframes)
                while state.merged_keyframes <= min(epoch, len(keyframes) - 1):
                    added = merge_keyframe(state, keyframes[state.merged_keyframes])
                    logger.debug(f"Merged keyframe cloud: {added} new anchors")
            pick = _sample(cfg, step_index, len(keyframes))
            record = train_step(state, keyframes[pick], pick)
            records.append(record)
            it = state.iteration

            if cfg.refine_start <= it <= cfg.refine_end and it % cfg.refine.window == 0:
                grown, pruned = refine(state)
                logger.debug(f"Refinement at {it}: +{grown} -{pruned} anchors, {len(state.anchors)} total")
            if it % cfg.log_every == 0:
                monitor.sample()
                logger.info(f"iter {it}: loss {record.total:.5f} l1 {record.l1:.5f} "
                            f"anchors {len(state.anchors)} gaussians {record.n_gaussians}")
            if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_checkpoint(state, out / 'checkpoint.bin')
            bar.update(1)
    finally:
        bar.close()

    monitor.sample()
    metrics = {
        'version': METRICS_VERSION,
        'iterations': state.iteration,
        'seed': cfg.seed,
        'n_anchors': len(state.anchors),
        'train': evaluate(state, train_frames, list(range(len(train_frames)))),
        'test': evaluate(state, test_frames),
        'ablation': {
            'appearance_mode': state.decoder.appearance_mode,
            'fpr_window': list(cfg.fpr.active_window),
            'init_mode': cfg.init_mode,
            'incremental': cfg.incremental,
        },
        'resources': monitor.summary(),
        'wall_time_s': time.time() - started,
    }
    result.update(status='success', metrics=metrics, state=state, records=records)

    if out is not None:
        try:
            save_checkpoint(state, out / 'checkpoint.bin')
            write_loss_csv(out / 'loss.csv', records)
            with open(out / 'metrics.json', 'w') as f:
                json.dump(metrics, f, indent=2)
            names = ['checkpoint.bin', 'loss.csv', 'metrics.json']
            if records and plot_loss(out / 'loss.png', records):
                names.append('loss.png')
            result['artifacts'] = {name: str(out / name) for name in names}
        except OSError as e:
            result['status'] = 'error'
            result['errors'].append(f"Could not write training artefacts to {out}: {e}")
    logger.info(f"Training done: test PSNR {metrics['test']['psnr']}, train PSNR {metrics['train']['psnr']}")
    return result
