"""
Decoders Module
Tiny MLPs turning anchor features, view geometry and the appearance
embedding into per-Gaussian parameters, with hand-written reverse mode
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from scipy.special import expit

from modules.camera import CameraPose
from modules.errors import ConfigError, ShapeMismatchError, UsageError
from modules.scene_core import Anchor, AnchorSet

logger = logging.getLogger(__name__)

# viewing direction used when the camera center coincides with an anchor
FALLBACK_DIRECTION = np.array([0.0, 0.0, 1.0])
IDENTITY_QUATERNION = np.array([1.0, 0.0, 0.0, 0.0])
POSE_ENCODING_DIM = 7
# sigmoid outputs are kept this far inside (0, 1)
UNIT_MARGIN = 1e-12


class Mlp:
    """Fully connected network, ReLU between layers, identity output.

    Weights are (out, in) matrices. forward() caches what backward() needs;
    apply() is the cache-free variant for evaluation.
    """

    def __init__(self, dims: List[int], rng: np.random.Generator = None, name: str = "mlp"):
        if len(dims) < 2:
            raise ConfigError(name, "an MLP needs at least input and output dims")
        self.name = name
        self.dims = [int(d) for d in dims]
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: List[np.ndarray] = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
            self.params.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.params.append(rng.uniform(-bound, bound, size=fan_out))
        self.grads = [np.zeros_like(p) for p in self.params]
        self._cache = None

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def weight(self, i: int) -> np.ndarray:
        return self.params[2 * i]

    def bias(self, i: int) -> np.ndarray:
        return self.params[2 * i + 1]

    def zero_grad(self) -> None:
        for g in self.grads:
            g[:] = 0.0

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 2 or x.shape[1] != self.dims[0]:
            raise ConfigError(self.name, f"expected input width {self.dims[0]}, got {x.shape}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        self._check_input(x)
        for i in range(self.n_layers):
            x = x @ self.weight(i).T + self.bias(i)
            if i < self.n_layers - 1:
                x = np.maximum(x, 0.0)
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check_input(x)
        inputs = []
        for i in range(self.n_layers):
            inputs.append(x)
            x = x @ self.weight(i).T + self.bias(i)
            if i < self.n_layers - 1:
                x = np.maximum(x, 0.0)
        self._cache = inputs
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients, return dL/dx"""
        if self._cache is None:
            raise UsageError(f"{self.name}: backward called before forward")
        inputs = self._cache
        dz = dy
        for i in reversed(range(self.n_layers)):
            x_in = inputs[i]
            self.grads[2 * i] += dz.T @ x_in
            self.grads[2 * i + 1] += dz.sum(axis=0)
            dx = dz @ self.weight(i)
            if i > 0:
                # x_in is the ReLU output of layer i - 1
                dx = dx * (x_in > 0.0)
            dz = dx
        return dz


class AfmeEncoder:
    """Appearance-from-motion: pose encoding [quaternion, translation] -> embedding"""

    mode = "afme"

    def __init__(self, n_appearance: int, hidden: bool = False, rng: np.random.Generator = None):
        dims = [POSE_ENCODING_DIM, 32, n_appearance] if hidden else [POSE_ENCODING_DIM, n_appearance]
        self.mlp = Mlp(dims, rng, name="afme")
        self._encoding = None

    @property
    def n_appearance(self) -> int:
        return self.mlp.dims[-1]

    def mlps(self) -> List[Mlp]:
        return [self.mlp]

    def embed(self, pose: CameraPose, view_index: Optional[int] = None,
              cache: bool = True) -> np.ndarray:
        encoding = pose.encode()[None, :]
        if not cache:
            return self.mlp.apply(encoding)[0]
        self._encoding = encoding[0]
        return self.mlp.forward(encoding)[0]

    def backward(self, d_embedding: np.ndarray) -> np.ndarray:
        """Returns dL/d(pose encoding)"""
        if self._encoding is None:
            raise UsageError("afme: backward called before embed")
        return self.mlp.backward(d_embedding[None, :])[0]


class EmbeddingTable:
    """Per-training-image learnable embedding; unseen views use the table mean"""

    mode = "ae"

    def __init__(self, n_views: int, n_appearance: int, rng: np.random.Generator = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        table = Mlp([n_views, n_appearance], rng, name="ae")
        # a bias-free linear layer over a one-hot view index is exactly a lookup table
        table.params[1][:] = 0.0
        self.mlp = table
        self._index = None

    @property
    def n_appearance(self) -> int:
        return self.mlp.dims[-1]

    def mlps(self) -> List[Mlp]:
        return [self.mlp]

    def embed(self, pose: CameraPose = None, view_index: Optional[int] = None,
              cache: bool = True) -> np.ndarray:
        if cache:
            self._index = view_index
        W = self.mlp.weight(0)
        if view_index is None:
            return W.mean(axis=1)
        return W[:, view_index].copy()

    def backward(self, d_embedding: np.ndarray) -> np.ndarray:
        W_grad = self.mlp.grads[0]
        if self._index is None:
            W_grad += d_embedding[:, None] / W_grad.shape[1]
        else:
            W_grad[:, self._index] += d_embedding
        return np.zeros(POSE_ENCODING_DIM)


@dataclass
class ViewContext:
    delta: np.ndarray      # (N,) anchor to camera-center distance
    direction: np.ndarray  # (N, 3) unit (camera - anchor) / distance


@dataclass
class GaussianPrimitive:
    mu: np.ndarray
    alpha: float
    color: np.ndarray
    quat: np.ndarray
    scale: np.ndarray
    active: bool


@dataclass
class GaussianBatch:
    """Decoded children of N anchors, k each"""
    mu: np.ndarray      # (N, k, 3)
    alpha: np.ndarray   # (N, k) tanh output, active where > 0
    color: np.ndarray   # (N, k, 3)
    quat: np.ndarray    # (N, k, 4)
    scale: np.ndarray   # (N, k, 3)

    @property
    def active(self) -> np.ndarray:
        return self.alpha > 0.0

    def primitive(self, anchor: int, child: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.mu[anchor, child], float(self.alpha[anchor, child]),
                                 self.color[anchor, child], self.quat[anchor, child],
                                 self.scale[anchor, child], bool(self.alpha[anchor, child] > 0.0))


@dataclass
class GaussianGrads:
    """Upstream gradients w.r.t. every decoded quantity, same shapes as GaussianBatch"""
    mu: np.ndarray
    alpha: np.ndarray
    color: np.ndarray
    quat: np.ndarray
    scale: np.ndarray

    @classmethod
    def zeros(cls, n: int, k: int) -> "GaussianGrads":
        return cls(np.zeros((n, k, 3)), np.zeros((n, k)), np.zeros((n, k, 3)),
                   np.zeros((n, k, 4)), np.zeros((n, k, 3)))


@dataclass
class AnchorGrads:
    features: np.ndarray
    offsets: np.ndarray
    scale: np.ndarray       # w.r.t. l_v
    log_scale: np.ndarray   # w.r.t. log l_v (what the optimizer sees)
    embedding: np.ndarray
    pose_encoding: np.ndarray


def view_context(centers: np.ndarray, pose: CameraPose) -> ViewContext:
    """Distance and unit direction from each anchor to the camera center"""
    diff = pose.center - centers
    delta = np.linalg.norm(diff, axis=1)
    direction = np.tile(FALLBACK_DIRECTION, (len(centers), 1))
    nonzero = delta > 0.0
    direction[nonzero] = diff[nonzero] / delta[nonzero, None]
    return ViewContext(delta, direction)


def decode_positions_batch(centers: np.ndarray, offsets: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return centers[:, None, :] + offsets * scale[:, None, :]


def open_sigmoid(z: np.ndarray) -> np.ndarray:
    return np.clip(expit(z), UNIT_MARGIN, 1.0 - UNIT_MARGIN)


def _unclipped(y: np.ndarray) -> np.ndarray:
    return (y > UNIT_MARGIN) & (y < 1.0 - UNIT_MARGIN)


def normalize_quaternions(raw: np.ndarray) -> np.ndarray:
    """Unit-normalise 4-blocks along the last axis; zero blocks become identity"""
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    safe = np.where(norm > 0.0, norm, 1.0)
    return np.where(norm > 0.0, raw / safe, IDENTITY_QUATERNION)


class AnchorDecoder:
    """The four attribute MLPs plus the optional appearance model"""

    def __init__(self, k: int = 10, feature_dim: int = 32, hidden: int = 32,
                 n_appearance: int = 32, appearance_mode: str = "afme",
                 afme_hidden: bool = False, n_views: int = 0,
                 rng: np.random.Generator = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if appearance_mode not in ("afme", "ae", "none"):
            raise ConfigError("train.appearance_mode", f"unknown mode {appearance_mode!r}")
        if appearance_mode == "none" or n_appearance == 0:
            appearance_mode, n_appearance = "none", 0
        self.k = k
        self.feature_dim = feature_dim
        self.n_appearance = n_appearance
        geo_dim = feature_dim + 4
        self.mlp_opacity = Mlp([geo_dim, hidden, k], rng, name="mlp_opacity")
        self.mlp_color = Mlp([geo_dim + n_appearance, hidden, 3 * k], rng, name="mlp_color")
        self.mlp_rotation = Mlp([geo_dim, hidden, 4 * k], rng, name="mlp_rotation")
        self.mlp_scale = Mlp([geo_dim, hidden, 3 * k], rng, name="mlp_scale")
        if appearance_mode == "afme":
            self.appearance = AfmeEncoder(n_appearance, afme_hidden, rng)
        elif appearance_mode == "ae":
            if n_views < 1:
                raise ConfigError("train.appearance_mode", "'ae' needs at least one training view")
            self.appearance = EmbeddingTable(n_views, n_appearance, rng)
        else:
            self.appearance = None
        self._cache = None

    @property
    def appearance_mode(self) -> str:
        return self.appearance.mode if self.appearance is not None else "none"

    def mlps(self) -> Dict[str, Mlp]:
        out = {
            'mlp_opacity': self.mlp_opacity,
            'mlp_color': self.mlp_color,
            'mlp_rotation': self.mlp_rotation,
            'mlp_scale': self.mlp_scale,
        }
        if self.appearance is not None:
            out['appearance'] = self.appearance.mlp
        return out

    def zero_grad(self) -> None:
        for mlp in self.mlps().values():
            mlp.zero_grad()

    def embed(self, pose: CameraPose, view_index: Optional[int] = None,
              cache: bool = True) -> np.ndarray:
        if self.appearance is None:
            return np.zeros(0)
        return self.appearance.embed(pose, view_index, cache)

    def _inputs(self, anchors: AnchorSet, view: ViewContext, embedding: np.ndarray):
        if embedding.shape != (self.n_appearance,):
            raise ConfigError("decoders", f"embedding has shape {embedding.shape}, "
                              f"decoder expects ({self.n_appearance},)")
        x_geo = np.concatenate([anchors.features, view.delta[:, None], view.direction], axis=1)
        x_color = np.concatenate([x_geo, np.tile(embedding, (len(anchors), 1))], axis=1)
        return x_geo, x_color

    def decode(self, anchors: AnchorSet, pose: CameraPose,
               embedding: Optional[np.ndarray] = None, cache: bool = True) -> GaussianBatch:
        """Decode every anchor for one view; embedding defaults to self.embed(pose)"""
        if anchors.k != self.k or anchors.feature_dim != self.feature_dim:
            raise ShapeMismatchError(f"anchors are k={anchors.k}, F={anchors.feature_dim}; "
                                     f"decoder expects k={self.k}, F={self.feature_dim}")
        if embedding is None:
            embedding = self.embed(pose, cache=cache)
        n, k = len(anchors), self.k
        view = view_context(anchors.centers, pose)
        x_geo, x_color = self._inputs(anchors, view, embedding)
        run = (lambda m, x: m.forward(x)) if cache else (lambda m, x: m.apply(x))

        alpha = np.tanh(run(self.mlp_opacity, x_geo))
        color = open_sigmoid(run(self.mlp_color, x_color)).reshape(n, k, 3)
        raw_quat = run(self.mlp_rotation, x_geo).reshape(n, k, 4)
        quat = normalize_quaternions(raw_quat)
        scale_gate = open_sigmoid(run(self.mlp_scale, x_geo)).reshape(n, k, 3)
        l_v = anchors.scale
        scale = scale_gate * l_v[:, None, :]
        mu = decode_positions_batch(anchors.centers, anchors.offsets, l_v)

        if cache:
            self._cache = {
                'n': n, 'l_v': l_v, 'offsets': anchors.offsets.copy(), 'alpha': alpha,
                'color': color, 'raw_quat': raw_quat, 'quat': quat, 'scale_gate': scale_gate,
            }
        return GaussianBatch(mu, alpha, color, quat, scale)

    def backward(self, grads: GaussianGrads) -> AnchorGrads:
        """Chain Gaussian-parameter gradients back to anchors, MLPs and the appearance model.

        MLP and appearance gradients accumulate into each Mlp.grads.
        """
        c = self._cache
        if c is None:
            raise UsageError("decoder backward called without a cached forward pass")
        n, k, F = c['n'], self.k, self.feature_dim
        l_v = c['l_v']

        d_offsets = grads.mu * l_v[:, None, :]
        d_lv = (grads.mu * c['offsets']).sum(axis=1)

        gate = c['scale_gate']
        d_lv += (grads.scale * gate).sum(axis=1)
        dz_scale = grads.scale * l_v[:, None, :] * gate * (1.0 - gate) * _unclipped(gate)

        alpha = c['alpha']
        dz_alpha = grads.alpha * (1.0 - alpha ** 2) * (alpha > 0.0)

        color = c['color']
        dz_color = grads.color * color * (1.0 - color) * _unclipped(color)

        raw, quat = c['raw_quat'], c['quat']
        norm = np.linalg.norm(raw, axis=-1, keepdims=True)
        radial = (quat * grads.quat).sum(axis=-1, keepdims=True)
        safe = np.where(norm > 0.0, norm, 1.0)
        dz_quat = np.where(norm > 0.0, (grads.quat - quat * radial) / safe, 0.0)

        dx_geo = self.mlp_opacity.backward(dz_alpha)
        dx_geo += self.mlp_rotation.backward(dz_quat.reshape(n, 4 * k))
        dx_geo += self.mlp_scale.backward(dz_scale.reshape(n, 3 * k))
        dx_color = self.mlp_color.backward(dz_color.reshape(n, 3 * k))
        dx_geo += dx_color[:, :F + 4]
        d_embedding = dx_color[:, F + 4:].sum(axis=0)

        if self.appearance is not None:
            d_pose = self.appearance.backward(d_embedding)
        else:
            d_pose = np.zeros(POSE_ENCODING_DIM)

        return AnchorGrads(features=dx_geo[:, :F], offsets=d_offsets, scale=d_lv,
                           log_scale=d_lv * l_v, embedding=d_embedding, pose_encoding=d_pose)


def _single_view(view: ViewContext) -> ViewContext:
    return ViewContext(np.atleast_1d(view.delta)[:1], np.atleast_2d(view.direction)[:1])


def afme_embed(pose: CameraPose, params: Mlp) -> np.ndarray:
    """Embedding vector of one pose through the encoder MLP"""
    return params.apply(pose.encode()[None, :])[0]


def decode_positions(anchor: Anchor) -> np.ndarray:
    """mu_i = t_v + O_i * l_v for all k offsets"""
    return decode_positions_batch(anchor.center[None, :], anchor.offsets[None], anchor.scale[None, :])[0]


def _geo_input(anchor: Anchor, view: ViewContext) -> np.ndarray:
    view = _single_view(view)
    return np.concatenate([anchor.feature[None, :], view.delta[:, None], view.direction], axis=1)


def decode_color(anchor: Anchor, view: ViewContext, ell: np.ndarray, params: Mlp) -> np.ndarray:
    x = np.concatenate([_geo_input(anchor, view), np.asarray(ell, dtype=np.float64)[None, :]], axis=1)
    return open_sigmoid(params.apply(x)).reshape(-1, 3)


def decode_opacity(anchor: Anchor, view: ViewContext, params: Mlp) -> np.ndarray:
    """tanh outputs; entries <= 0 are inactive children"""
    return np.tanh(params.apply(_geo_input(anchor, view)))[0]


def decode_rotation(anchor: Anchor, view: ViewContext, params: Mlp) -> np.ndarray:
    return normalize_quaternions(params.apply(_geo_input(anchor, view)).reshape(-1, 4))


def decode_scale(anchor: Anchor, view: ViewContext, params: Mlp) -> np.ndarray:
    return open_sigmoid(params.apply(_geo_input(anchor, view)).reshape(-1, 3)) * anchor.scale[None, :]


def backward_decoders(decoder: AnchorDecoder, grads: GaussianGrads) -> AnchorGrads:
    return decoder.backward(grads)
