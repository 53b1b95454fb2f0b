"""Embedding network: image -> unit-norm MAC descriptor, plus triplet training.

Backbone (valid convolutions, channels-last)::

    conv 5x5x3x16  -> relu -> maxpool 2
    conv 5x5x16x32 -> relu -> maxpool 2
    conv 3x3x32xD  -> relu                 (final feature map, D channels)

The global descriptor is the per-channel max over the whole final map (MAC)
followed by L2 normalisation.  Local features come from the same map by
max-pooling with a smaller window, so both are produced by one forward pass.
"""
import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import numerics as nx
from .errors import (ConfigError, DimensionError, FormatError, InsufficientDataError,
                     IOFailure, TrainingError)
from .imaging import as_image, resize

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EMB1"
PARAM_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3")
# (kernel, stride) of every spatial layer, input to output
LAYER_GEOMETRY = ((5, 1), (2, 2), (5, 1), (2, 2), (3, 1))
# local-feature window on the 11x11 map of a 64-pixel input: 8x8 cells at
# stride 1, i.e. 16 windows; smaller windows on a trained net are mostly
# one-hot and make the match weight noisy
LF_KERNEL, LF_STRIDE = 8, 1
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class LocalFeature:
    x: float
    y: float
    f: np.ndarray
    v: np.ndarray


@dataclass
class Triplet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    positive_index: int
    negative_index: int


@dataclass
class AugmentConfig:
    blur_p: float = 0.5
    sigma_min: float = 0.5
    sigma_max: float = 2.0
    crop_p: float = 0.7
    crop_min: float = 0.8
    brightness_p: float = 0.7
    brightness_min: float = 0.6
    brightness_max: float = 1.4
    saturation_p: float = 0.7
    saturation_min: float = 0.6
    saturation_max: float = 1.4

    @classmethod
    def identity(cls):
        return cls(blur_p=0.0, crop_p=0.0, brightness_p=0.0, saturation_p=0.0)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d, "aug")


@dataclass
class TrainConfig:
    alpha: float = 0.1
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 24
    seed: int = 0
    input_size: int = 64
    descriptor_dim: int = 32
    aug: AugmentConfig = field(default_factory=AugmentConfig)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        aug = AugmentConfig.from_dict(d.pop("aug", {}))
        cfg = _from_dict(cls, d, "train config")
        cfg.aug = aug
        return cfg

    @classmethod
    def from_json(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IOFailure(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc

    def to_dict(self):
        return asdict(self)


def _from_dict(cls, d, what):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        default = getattr(cls(), k)
        kwargs[k] = type(default)(v) if isinstance(default, (int, float)) else v
    return cls(**kwargs)


class EmbedderNet:
    """Weights of the three-conv backbone; ``descriptor_dim`` equals the
    channel count of the last conv."""

    def __init__(self, params, input_size=64):
        missing = [k for k in PARAM_ORDER if k not in params]
        if missing:
            raise DimensionError(f"missing parameters {missing}")
        self.params = {k: np.asarray(params[k]) for k in PARAM_ORDER}
        self.input_size = int(input_size)
        if feature_map_size(self.input_size) < 1:
            raise DimensionError(f"input size {input_size} too small for the backbone")

    @classmethod
    def init(cls, descriptor_dim=32, seed=0, input_size=64, dtype=np.float32):
        rng = np.random.default_rng(seed)
        shapes = {"w1": (5, 5, 3, 16), "w2": (5, 5, 16, 32), "w3": (3, 3, 32, descriptor_dim)}
        params = {}
        for i, name in enumerate(("w1", "w2", "w3"), start=1):
            shape = shapes[name]
            fan_in = shape[0] * shape[1] * shape[2]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
            params[f"b{i}"] = np.full(shape[3], 0.01, dtype=dtype)
        return cls(params, input_size)

    @property
    def descriptor_dim(self):
        return self.params["w3"].shape[3]

    @property
    def dtype(self):
        return self.params["w1"].dtype

    def astype(self, dtype):
        return EmbedderNet({k: v.astype(dtype) for k, v in self.params.items()}, self.input_size)

    def copy(self):
        return EmbedderNet(copy.deepcopy(self.params), self.input_size)

    def forward(self, images):
        """Batched forward on ``(N, S, S, 3)`` inputs.

        Returns ``(descriptors (N, D), feature_map (N, h, w, D), caches)``.
        """
        p = self.params
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim != 4 or x.shape[3] != 3:
            raise DimensionError(f"expected (N, H, W, 3) images, got shape {x.shape}")
        a, c1 = nx.conv2d(x, p["w1"], 1, p["b1"])
        a, r1 = nx.relu(a)
        a, _, p1 = nx.maxpool(a, 2, 2)
        a, c2 = nx.conv2d(a, p["w2"], 1, p["b2"])
        a, r2 = nx.relu(a)
        a, _, p2 = nx.maxpool(a, 2, 2)
        a, c3 = nx.conv2d(a, p["w3"], 1, p["b3"])
        fmap, r3 = nx.relu(a)
        mac, _, pg = nx.maxpool(fmap, fmap.shape[1:3])
        desc, cn = nx.l2_normalize(mac.reshape(len(x), -1))
        return desc, fmap, (c1, r1, p1, c2, r2, p2, c3, r3, pg, cn)

    def backward(self, grad_desc, caches):
        """Gradients of a scalar w.r.t. every parameter given d/d(descriptors)."""
        c1, r1, p1, c2, r2, p2, c3, r3, pg, cn = caches
        g = nx.l2_normalize_backward(grad_desc, cn)
        g = nx.maxpool_backward(g.reshape(len(g), 1, 1, -1).astype(self.dtype), pg)
        g = nx.relu_backward(g, r3)
        g, gw3, gb3 = nx.conv2d_backward(g, c3)
        g = nx.maxpool_backward(g, p2)
        g = nx.relu_backward(g, r2)
        g, gw2, gb2 = nx.conv2d_backward(g, c2)
        g = nx.maxpool_backward(g, p1)
        g = nx.relu_backward(g, r1)
        _, gw1, gb1 = nx.conv2d_backward(g, c1, input_grad=False)
        return {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "w3": gw3, "b3": gb3}


def feature_map_size(input_size):
    s = input_size
    for k, st in LAYER_GEOMETRY:
        s = nx.conv_output_size(s, k, st)
    return s


def to_input_coords(c):
    """Map a (possibly fractional) final-feature-map coordinate to the centre
    of its receptive field in network-input pixel coordinates."""
    for k, st in reversed(LAYER_GEOMETRY):
        c = c * st + (k - 1) / 2.0
    return c


def prepare(image, input_size):
    """Stretch-resize an RGB image to the square network input."""
    image = as_image(image)
    return resize(image, (input_size, input_size))


def embed(net, image):
    desc, _, _ = net.forward(prepare(image, net.input_size)[None])
    return desc[0]


def describe(net, image, kernel, stride):
    """Global descriptor and local features from a single forward pass.

    Local-feature positions are expressed in the coordinates of ``image`` as
    given (before resizing to the network input).
    """
    image = as_image(image)
    h, w = image.shape[:2]
    desc, fmap, _ = net.forward(prepare(image, net.input_size)[None])
    return desc[0], _pool_locals(fmap, kernel, stride, net.input_size, (h, w))


def local_features(net, image, kernel, stride):
    return describe(net, image, kernel, stride)[1]


def _pool_locals(fmap, kernel, stride, input_size, source_hw):
    fh, fw = fmap.shape[1:3]
    if kernel > min(fh, fw):
        raise DimensionError(f"local-feature kernel {kernel} exceeds the {fh}x{fw} feature map")
    pooled, _, _ = nx.maxpool(fmap, kernel, stride)
    ho, wo, d = pooled.shape[1:]
    pooled = pooled.reshape(ho * wo, d)
    # a window where every channel is off has no direction; it is dropped
    # rather than normalised (the global descriptor stays strict)
    live = np.any(pooled > 0, axis=1)
    feats = np.zeros_like(pooled)
    if live.any():
        feats[live], _ = nx.l2_normalize(pooled[live])
    src_h, src_w = source_hw
    sy, sx = src_h / input_size, src_w / input_size
    cy, cx = (src_h - 1) / 2.0, (src_w - 1) / 2.0
    rows = nx.window_centers(fh, kernel, stride)
    cols = nx.window_centers(fw, kernel, stride)
    out = []
    for i, r in enumerate(rows):
        y = (to_input_coords(r) + 0.5) * sy - 0.5
        for j, c in enumerate(cols):
            if not live[i * wo + j]:
                continue
            x = (to_input_coords(c) + 0.5) * sx - 0.5
            # positions are stored as float32 on disk; keep memory and disk identical
            x32, y32 = float(np.float32(x)), float(np.float32(y))
            out.append(LocalFeature(x=x32, y=y32, f=feats[i * wo + j],
                                    v=center_direction(x32, y32, cx, cy)))
    return out


def center_direction(x, y, cx, cy):
    """Unit vector from ``(x, y)`` towards the image centre; ``(0, 0)`` for a
    feature sitting exactly on the centre."""
    d = np.array([cx - x, cy - y], dtype=np.float64)
    n = np.hypot(d[0], d[1])
    if n < 1e-9:
        return np.zeros(2, dtype=np.float32)
    return (d / n).astype(np.float32)


def triplet_loss(d_a, d_p, d_n, alpha):
    """Hinge on cosine distances: ``max(0, d(a, p) - d(a, n) + alpha)``."""
    from .store import cosine_distance
    return max(0.0, cosine_distance(d_a, d_p) - cosine_distance(d_a, d_n) + float(alpha))


def batch_triplet_loss(a, p, n, alpha):
    """Mean triplet loss over a batch and its gradients w.r.t. each input."""
    a64, p64, n64 = (np.asarray(t, dtype=np.float64) for t in (a, p, n))
    d_ap = 1.0 - np.sum(a64 * p64, axis=1)
    d_an = 1.0 - np.sum(a64 * n64, axis=1)
    losses = np.maximum(0.0, d_ap - d_an + alpha)
    active = (losses > 0).astype(np.float64)[:, None] / len(a64)
    ga = (n64 - p64) * active
    gp = -a64 * active
    gn = a64 * active
    return float(losses.mean()), ga, gp, gn


def augment(image, rng, params=None):
    """Random blur / crop / brightness / saturation, each applied with its own
    probability.  Output is clamped to [0, 1] and has the input's shape."""
    if params is None:
        params = AugmentConfig()
    img = as_image(image).astype(np.float64)
    h, w = img.shape[:2]
    if rng.random() < params.blur_p:
        sigma = rng.uniform(params.sigma_min, params.sigma_max)
        img = gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")
    if rng.random() < params.crop_p and params.crop_min < 1.0:
        ch = max(1, int(round(h * rng.uniform(params.crop_min, 1.0))))
        cw = max(1, int(round(w * rng.uniform(params.crop_min, 1.0))))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        img = resize(img[y0:y0 + ch, x0:x0 + cw], (h, w))
    if rng.random() < params.brightness_p:
        img = img * rng.uniform(params.brightness_min, params.brightness_max)
    if rng.random() < params.saturation_p:
        s = rng.uniform(params.saturation_min, params.saturation_max)
        gray = (img @ _LUMA)[..., None]
        img = gray + s * (img - gray)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_triplet(refs, rng, aug=None):
    """Two distinct products drawn uniformly; the anchor is an augmented copy
    of the positive's reference image."""
    if len(refs) < 2:
        raise InsufficientDataError(f"need at least 2 products to form a triplet, got {len(refs)}")
    ip, ineg = (int(i) for i in rng.choice(len(refs), size=2, replace=False))
    pos = refs[ip]
    return Triplet(anchor=augment(pos, rng, aug), positive=pos, negative=refs[ineg],
                   positive_index=ip, negative_index=ineg)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            params[k] = (params[k] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(params[k].dtype)


def train(net, refs, config=None, history=None):
    """Minimise the batched triplet loss with Adam; returns a new net.

    ``refs`` is a sequence of reference images, one per product.  Mean batch
    losses are appended to ``history`` when given.
    """
    config = config or TrainConfig()
    if len(refs) < 2:
        raise InsufficientDataError(f"training needs at least 2 products, got {len(refs)}")
    net = net.copy()
    if config.steps <= 0:
        return net
    rng = np.random.default_rng(config.seed)
    inputs = [prepare(r, net.input_size) for r in refs]
    opt = Adam(net.params, config.lr)
    b = config.batch
    for step in range(config.steps):
        triplets = [make_triplet(inputs, rng, config.aug) for _ in range(b)]
        batch = np.stack([t.anchor for t in triplets] + [t.positive for t in triplets]
                         + [t.negative for t in triplets])
        desc, _, caches = net.forward(batch)
        loss, ga, gp, gn = batch_triplet_loss(desc[:b], desc[b:2 * b], desc[2 * b:], config.alpha)
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}")
        grads = net.backward(np.concatenate([ga, gp, gn]), caches)
        opt.step(net.params, grads)
        if not all(np.all(np.isfinite(v)) for v in net.params.values()):
            raise TrainingError(f"non-finite weights after step {step}")
        if history is not None:
            history.append(loss)
        log.debug("step %d loss %.6f", step, loss)
    return net


def save_checkpoint(net, path):
    chunks = [CHECKPOINT_MAGIC]
    for name in PARAM_ORDER:
        t = np.ascontiguousarray(net.params[name], dtype="<f4")
        chunks.append(struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(t.tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, input_size=64):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    off = 4
    tensors = []

    def take(nbytes):
        nonlocal off
        if off + nbytes > len(buf):
            raise FormatError(f"{path}: truncated checkpoint", off)
        chunk = buf[off:off + nbytes]
        off += nbytes
        return chunk

    while off < len(buf):
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise FormatError(f"{path}: implausible tensor rank {rank}", off - 4)
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        tensors.append(data)
    if len(tensors) != len(PARAM_ORDER):
        raise FormatError(f"{path}: expected {len(PARAM_ORDER)} tensors, found {len(tensors)}", off)
    params = dict(zip(PARAM_ORDER, tensors))
    w1, w2, w3 = params["w1"], params["w2"], params["w3"]
    ok = (w1.shape[:3] == (5, 5, 3) and w2.shape[:3] == (5, 5, w1.shape[3])
          and w3.shape[:3] == (3, 3, w2.shape[3])
          and all(params[f"b{i}"].shape == (params[f"w{i}"].shape[3],) for i in (1, 2, 3)))
    if not ok:
        raise FormatError(f"{path}: tensor shapes do not match the backbone", off)
    return EmbedderNet(params, input_size)
