"""
Datakit Module
Synthetic scenes, trajectories and bundle-adjustment instances, plus the
on-disk dataset format (PNG images, TUM poses, ASCII PLY clouds, meta.json)
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import imageio.v2 as imageio
import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError

from modules.camera import CameraPose, PinholeCamera
from modules.errors import DatasetError, ParseError, RejectedInputError
from modules.geometry import BAProblem, Observation
from modules.rasterizer import RasterConfig, SplatBatch, blend_naive, project_gaussians

logger = logging.getLogger(__name__)

META_VERSION = 1
WORKING_VOLUME = 1.0


@dataclass
class Blob:
    center: Tuple[float, float, float]
    sigma: Tuple[float, float, float]
    color: Tuple[float, float, float]
    opacity: float = 0.9


@dataclass
class CameraRing:
    count: int = 10
    radius: float = 1.2
    height: float = 0.3
    target: Tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class NoiseSpec:
    image_sigma: float = 0.0
    cloud_sigma: float = 0.0
    points_per_blob: int = 200


@dataclass
class SyntheticScene:
    blobs: List[Blob]
    ring: CameraRing = field(default_factory=CameraRing)
    width: int = 64
    height: int = 64
    focal: float = 64.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    appearance_amplitude: float = 0.0
    keyframe_every: int = 5
    keyframes: Optional[List[int]] = None

    def validate(self) -> None:
        if self.ring.count < 2:
            raise RejectedInputError("scene needs at least 2 cameras")
        if not self.blobs:
            raise RejectedInputError("scene needs at least one blob")
        half = WORKING_VOLUME / 2.0
        for i, blob in enumerate(self.blobs):
            if np.any(np.abs(blob.center) > half):
                raise RejectedInputError(f"blob {i} center {blob.center} lies outside the unit working volume")
            if np.any(np.asarray(blob.sigma) <= 0):
                raise RejectedInputError(f"blob {i} needs positive sigma")
            if not 0 < blob.opacity < 1:
                raise RejectedInputError(f"blob {i} opacity must be within (0, 1)")
        if self.keyframes is None and self.keyframe_every < 1:
            raise RejectedInputError("keyframe_every must be at least 1")

    @property
    def camera(self) -> PinholeCamera:
        return PinholeCamera(self.focal, self.focal, self.width / 2.0, self.height / 2.0,
                             self.width, self.height)

    def keyframe_flags(self) -> np.ndarray:
        flags = np.zeros(self.ring.count, dtype=bool)
        if self.keyframes is not None:
            flags[list(self.keyframes)] = True
        else:
            flags[::self.keyframe_every] = True
        return flags

    def headings(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.ring.count) / self.ring.count

    def poses(self) -> List[CameraPose]:
        target = np.asarray(self.ring.target, dtype=np.float64)
        poses = []
        for theta in self.headings():
            eye = target + np.array([self.ring.radius * math.cos(theta), -self.ring.height,
                                     self.ring.radius * math.sin(theta)])
            poses.append(CameraPose.look_at(eye, target))
        return poses

    def gains(self) -> np.ndarray:
        """Per-view brightness gain 1 + amplitude * sin(heading)"""
        return 1.0 + self.appearance_amplitude * np.sin(self.headings())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict, seed: int = 0) -> "SyntheticScene":
        data = dict(data)
        if 'n_blobs' in data:
            blobs = random_blobs(int(data.pop('n_blobs')), seed)
        else:
            blobs = [Blob(**b) for b in data.pop('blobs', [])]
        ring = CameraRing(**data.pop('ring', {}))
        noise = NoiseSpec(**data.pop('noise', {}))
        appearance = data.pop('appearance', None)
        if appearance is not None:
            data['appearance_amplitude'] = float(appearance.get('amplitude', 0.0))
        scene = cls(blobs=blobs, ring=ring, noise=noise, **data)
        scene.validate()
        return scene


def random_blobs(n: int, seed: int) -> List[Blob]:
    rng = np.random.default_rng([seed, 3])
    blobs = []
    for _ in range(n):
        blobs.append(Blob(center=tuple(rng.uniform(-0.3, 0.3, 3)),
                          sigma=tuple(rng.uniform(0.03, 0.09, 3)),
                          color=tuple(rng.uniform(0.1, 0.9, 3)),
                          opacity=float(rng.uniform(0.6, 0.95))))
    return blobs


@dataclass
class Frame:
    index: int
    image: np.ndarray
    pose: CameraPose
    is_keyframe: bool
    gain: float = 1.0


@dataclass
class Dataset:
    frames: List[Frame]
    camera: PinholeCamera
    cloud: np.ndarray           # (n, 3)
    cloud_keyframe: np.ndarray  # (n,) owning keyframe index
    meta: dict = field(default_factory=dict)

    def keyframe_cloud(self, index: int) -> np.ndarray:
        return self.cloud[self.cloud_keyframe == index]


# ---------------------------------------------------------------------------
# rendering and generation
# ---------------------------------------------------------------------------

def render_blobs(blobs: Sequence[Blob], pose: CameraPose, cam: PinholeCamera,
                 cfg: RasterConfig = None) -> np.ndarray:
    """Ground-truth image of axis-aligned blobs through the reference blender"""
    n = len(blobs)
    mu = np.array([b.center for b in blobs], dtype=np.float64).reshape(n, 3)
    quat = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    scale = np.array([b.sigma for b in blobs], dtype=np.float64).reshape(n, 3)
    color = np.array([b.color for b in blobs], dtype=np.float64).reshape(n, 3)
    alpha = np.array([b.opacity for b in blobs], dtype=np.float64)
    proj = project_gaussians(mu, quat, scale, color, alpha, pose, cam, cfg)
    return blend_naive(proj.splats, cam, cfg).image


def _visible(points: np.ndarray, pose: CameraPose, cam: PinholeCamera) -> np.ndarray:
    p = pose.transform(points)
    z = p[:, 2]
    with np.errstate(divide='ignore', invalid='ignore'):
        u = cam.fx * p[:, 0] / z + cam.cx
        v = cam.fy * p[:, 1] / z + cam.cy
    return (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)


def sample_cloud(scene: SyntheticScene, seed: int) -> np.ndarray:
    """Points on the one-sigma ellipsoid of every blob, with optional jitter"""
    chunks = []
    for i, blob in enumerate(scene.blobs):
        rng = np.random.default_rng([seed, 2, i])
        d = rng.normal(size=(scene.noise.points_per_blob, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = np.asarray(blob.center) + d * np.asarray(blob.sigma)
        if scene.noise.cloud_sigma > 0:
            pts = pts + rng.normal(scale=scene.noise.cloud_sigma, size=pts.shape)
        chunks.append(pts)
    return np.concatenate(chunks) if chunks else np.zeros((0, 3))


def assign_keyframes(cloud: np.ndarray, poses: List[CameraPose], keyframe_ids: Sequence[int],
                     cam: PinholeCamera) -> np.ndarray:
    """Owner of each point: first keyframe that sees it, else the nearest keyframe"""
    owner = np.full(len(cloud), -1, dtype=np.int64)
    for k in keyframe_ids:
        free = owner < 0
        owner[free & _visible(cloud, poses[k], cam)] = k
    left = owner < 0
    if np.any(left):
        centers = np.array([poses[k].center for k in keyframe_ids])
        dist = np.linalg.norm(cloud[left][:, None, :] - centers[None, :, :], axis=2)
        owner[left] = np.asarray(keyframe_ids)[np.argmin(dist, axis=1)]
    return owner


def synthesize(scene: SyntheticScene, seed: int = 0, workers: int = 1) -> Dataset:
    """Build a dataset in memory; a pure function of (scene, seed)"""
    scene.validate()
    cam = scene.camera
    poses = scene.poses()
    gains = scene.gains()
    flags = scene.keyframe_flags()

    def make_view(i: int) -> Frame:
        rng = np.random.default_rng([seed, 1, i])
        image = render_blobs(scene.blobs, poses[i], cam) * gains[i]
        if scene.noise.image_sigma > 0:
            image = image + rng.normal(scale=scene.noise.image_sigma, size=image.shape)
        return Frame(i, np.clip(image, 0.0, 1.0), poses[i], bool(flags[i]), float(gains[i]))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            frames = list(pool.map(make_view, range(scene.ring.count)))
    else:
        frames = [make_view(i) for i in range(scene.ring.count)]

    cloud = sample_cloud(scene, seed)
    owner = assign_keyframes(cloud, poses, np.flatnonzero(flags).tolist(), cam)
    centers = np.array([b.center for b in scene.blobs])
    meta = {
        'version': META_VERSION,
        'seed': seed,
        'intrinsics': cam.to_dict(),
        'keyframes': flags.tolist(),
        'gains': gains.tolist(),
        'bounds': {'min': (centers.min(axis=0) - 0.5).tolist(),
                   'max': (centers.max(axis=0) + 0.5).tolist()},
        'image_count': len(frames),
        'scene': scene.to_dict(),
    }
    return Dataset(frames, cam, cloud, owner, meta)


def generate(scene: SyntheticScene, seed: int, out_dir, workers: int = 1) -> Dict:
    """Synthesize and write a dataset directory"""
    result = {'status': 'pending', 'path': str(out_dir), 'frames': 0, 'points': 0, 'errors': []}
    try:
        dataset = synthesize(scene, seed, workers)
        save_dataset(dataset, out_dir)
        result.update(status='success', frames=len(dataset.frames), points=len(dataset.cloud))
        logger.info(f"Wrote {len(dataset.frames)} views and {len(dataset.cloud)} points to {out_dir}")
    except OSError as e:
        result['status'] = 'error'
        result['errors'].append(f"Could not write dataset: {e}")
    return result


# ---------------------------------------------------------------------------
# bundle adjustment instances
# ---------------------------------------------------------------------------

@dataclass
class BATruth:
    poses: Dict[int, CameraPose]
    points: Dict[int, np.ndarray]
    outliers: np.ndarray  # (n_obs,) flags aligned with problem.observations


def make_ba_instance(n_keyframes: int, n_points: int, noise: float = 0.0,
                     outlier_fraction: float = 0.0, seed: int = 0,
                     camera: PinholeCamera = None, arc: float = 0.6,
                     radius: float = 4.0, outlier_px: float = 50.0) -> Tuple[BAProblem, BATruth]:
    """Poses on an arc looking at the origin; points visible from every keyframe"""
    if n_points < 10:
        raise RejectedInputError("a BA instance needs at least 10 points")
    if n_keyframes < 1:
        raise RejectedInputError("a BA instance needs at least one keyframe")
    if not 0 <= outlier_fraction <= 1:
        raise RejectedInputError("outlier fraction must be within [0, 1]")
    cam = camera or PinholeCamera(500.0, 500.0, 320.0, 240.0, 640, 480)
    rng = np.random.default_rng([seed, 5])

    angles = np.linspace(-arc / 2, arc / 2, n_keyframes) if n_keyframes > 1 else np.zeros(1)
    poses = {}
    for i, a in enumerate(angles):
        eye = np.array([radius * math.sin(a), 0.2 * math.sin(2 * a), -radius * math.cos(a)])
        poses[i] = CameraPose.look_at(eye, np.zeros(3))

    points = {}
    margin = 10.0
    tries = 0
    while len(points) < n_points:
        tries += 1
        if tries > 1000 * n_points:
            raise RejectedInputError("frustum intersection too small to place the requested points")
        p = rng.uniform(-1.0, 1.0, 3)
        ok = True
        for pose in poses.values():
            pc = pose.transform(p[None, :])[0]
            if pc[2] <= 0.1:
                ok = False
                break
            u = cam.fx * pc[0] / pc[2] + cam.cx
            v = cam.fy * pc[1] / pc[2] + cam.cy
            if not (margin <= u < cam.width - margin and margin <= v < cam.height - margin):
                ok = False
                break
        if ok:
            points[len(points)] = p

    observations = []
    for kf, pose in poses.items():
        for pid, p in points.items():
            pc = pose.R @ p + pose.t
            pix = np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])
            if noise > 0:
                pix = pix + rng.normal(scale=noise, size=2)
            observations.append(Observation(kf, pid, pix))

    n_out = int(round(outlier_fraction * len(observations)))
    flags = np.zeros(len(observations), dtype=bool)
    if n_out:
        chosen = rng.choice(len(observations), size=n_out, replace=False)
        flags[chosen] = True
        for i in chosen:
            phi = rng.uniform(0.0, 2.0 * np.pi)
            obs = observations[i]
            observations[i] = Observation(obs.keyframe_id, obs.point_id,
                                          obs.pixel + outlier_px * np.array([math.cos(phi), math.sin(phi)]),
                                          obs.level)

    problem = BAProblem({k: p.copy() for k, p in poses.items()},
                        {k: p.copy() for k, p in points.items()},
                        observations, cam, {0})
    return problem, BATruth(poses, points, flags)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_png(path, image: np.ndarray) -> None:
    """Quantize [0, 1] floats to 8 bits"""
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    imageio.imwrite(path, data)


def load_png(path) -> np.ndarray:
    try:
        data = np.asarray(imageio.imread(path))
    except (OSError, ValueError) as e:
        raise ParseError(path, f"not a readable PNG ({e})")
    if data.ndim == 2:
        data = np.stack([data] * 3, axis=-1)
    return data[..., :3].astype(np.float64) / 255.0


def save_ply(path, points: np.ndarray, properties: Dict[str, np.ndarray] = None) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    properties = properties or {}
    dtype = [('x', 'f8'), ('y', 'f8'), ('z', 'f8')]
    for name, values in properties.items():
        dtype.append((name, 'i4' if np.issubdtype(np.asarray(values).dtype, np.integer) else 'f8'))
    vertices = np.empty(len(points), dtype=dtype)
    vertices['x'], vertices['y'], vertices['z'] = points[:, 0], points[:, 1], points[:, 2]
    for name, values in properties.items():
        vertices[name] = values
    PlyData([PlyElement.describe(vertices, 'vertex')], text=True).write(str(path))


def load_ply(path) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Vertex positions (n, 3) and every extra per-vertex property"""
    try:
        ply = PlyData.read(str(path))
    except PlyParseError as e:
        line = getattr(e, 'line', None) or getattr(e, 'row', None)
        raise ParseError(path, str(e), line)
    except (ValueError, UnicodeDecodeError) as e:
        raise ParseError(path, f"malformed PLY ({e})")
    if 'vertex' not in ply:
        return np.zeros((0, 3)), {}
    data = ply['vertex'].data
    names = data.dtype.names or ()
    for axis in ('x', 'y', 'z'):
        if axis not in names:
            raise ParseError(path, f"vertex element has no '{axis}' property")
    points = np.stack([np.asarray(data[a], dtype=np.float64) for a in ('x', 'y', 'z')], axis=1).reshape(-1, 3)
    extra = {n: np.asarray(data[n]) for n in names if n not in ('x', 'y', 'z')}
    return points, extra


def save_anchors_ply(path, anchors) -> None:
    """Anchor centers with their per-axis scale for inspection"""
    scale = anchors.scale
    save_ply(path, anchors.centers, {'scale_x': scale[:, 0], 'scale_y': scale[:, 1], 'scale_z': scale[:, 2]})


def save_tum(path, poses: Sequence[CameraPose], timestamps: Sequence[float] = None) -> None:
    timestamps = timestamps if timestamps is not None else range(len(poses))
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, pose in zip(timestamps, poses):
        pos, q = pose.to_tum()
        values = [float(ts), *pos.tolist(), *q.tolist()]
        lines.append(" ".join(repr(v) for v in values))
    Path(path).write_text("\n".join(lines) + "\n")


def parse_tum_pose(text: str, source: str = "<pose>", line: int = None) -> Tuple[float, CameraPose]:
    fields = text.split()
    if len(fields) == 7:
        fields = ["0"] + fields
    if len(fields) != 8:
        raise ParseError(source, f"expected 8 fields 'timestamp tx ty tz qx qy qz qw', got {len(fields)}", line)
    try:
        values = [float(f) for f in fields]
    except ValueError as e:
        raise ParseError(source, f"non-numeric field ({e})", line)
    try:
        pose = CameraPose.from_tum(np.array(values[1:4]), np.array(values[4:8]))
    except RejectedInputError as e:
        raise ParseError(source, str(e), line)
    return values[0], pose


def load_tum(path) -> Tuple[List[float], List[CameraPose]]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DatasetError(f"Could not read trajectory {path}: {e}")
    stamps, poses = [], []
    for number, raw in enumerate(text.splitlines(), start=1):
        raw = raw.strip()
        if not raw or raw.startswith('#'):
            continue
        ts, pose = parse_tum_pose(raw, str(path), number)
        stamps.append(ts)
        poses.append(pose)
    return stamps, poses


def save_dataset(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    (out / 'images').mkdir(parents=True, exist_ok=True)
    for frame in dataset.frames:
        save_png(out / 'images' / f"{frame.index:04d}.png", frame.image)
    save_tum(out / 'poses.txt', [f.pose for f in dataset.frames], [f.index for f in dataset.frames])
    save_ply(out / 'cloud.ply', dataset.cloud, {'keyframe': dataset.cloud_keyframe.astype(np.int32)})
    with open(out / 'meta.json', 'w') as f:
        json.dump(dataset.meta, f, indent=2)


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    for required in ('meta.json', 'poses.txt', 'cloud.ply', 'images'):
        if not (root / required).exists():
            raise DatasetError(f"Dataset {root} is missing {required}")
    try:
        with open(root / 'meta.json') as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(root / 'meta.json', e.msg, e.lineno)
    if meta.get('version') != META_VERSION:
        raise DatasetError(f"Unsupported dataset version {meta.get('version')!r}")

    camera = PinholeCamera.from_dict(meta['intrinsics'])
    stamps, poses = load_tum(root / 'poses.txt')
    flags = meta.get('keyframes', [True] * len(poses))
    gains = meta.get('gains', [1.0] * len(poses))
    images = sorted((root / 'images').glob('*.png'))
    if not (len(images) == len(poses) == len(flags) == len(gains)):
        raise DatasetError(f"Dataset {root} is inconsistent: {len(images)} images, "
                           f"{len(poses)} poses, {len(flags)} keyframe flags")

    frames = []
    for i, (path, pose) in enumerate(zip(images, poses)):
        image = load_png(path)
        if image.shape != (camera.height, camera.width, 3):
            raise DatasetError(f"{path} is {image.shape[1]}x{image.shape[0]}, "
                               f"intrinsics say {camera.width}x{camera.height}")
        frames.append(Frame(int(stamps[i]), image, pose, bool(flags[i]), float(gains[i])))

    cloud, extra = load_ply(root / 'cloud.ply')
    owner = extra.get('keyframe')
    if owner is None:
        first = next((f.index for f in frames if f.is_keyframe), 0)
        owner = np.full(len(cloud), first)
    return Dataset(frames, camera, cloud, np.asarray(owner, dtype=np.int64), meta)
