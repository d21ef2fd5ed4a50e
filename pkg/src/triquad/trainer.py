"""Ray sampling, BCE supervision, the optimization loop and checkpoints.

Sign convention: points between the sensor and the ray endpoint get a
negative SDF label, points beyond the endpoint a positive one. The learned
field is therefore positive *inside* objects.
"""

from __future__ import annotations

import dataclasses
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoder import MlpDecoder
from .encoding import PositionalEncoder
from .errors import (
    CorruptMagic,
    DegenerateRay,
    FormatError,
    InvalidConfig,
    NonFiniteLoss,
    TruncatedFile,
    VersionMismatch,
)
from .feature_grid import FeaturePlaneSet
from .geometry import PLANES, Extent, Ray
from .meshing import OccupancyMask

log = logging.getLogger(__name__)

MAGIC = b"3QFP"
VERSION = 1
NEAR_SURFACE, FREE_SPACE = "near_surface", "free_space"


@dataclass
class TrainConfig:
    """Training hyperparameters.

    Field order is the on-disk order of the checkpoint config block; ``int``
    fields are written as u64 and ``float`` fields as f64.
    """

    n_surface: int = 3
    n_free: int = 3
    tau: float = 0.3
    tau_s: float = 0.05
    batch_rays: int = 1024
    iterations: int = 2000
    lr_features: float = 1e-2
    lr_mlp: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    levels: int = 3
    max_level: int = 12
    feature_dim: int = 8
    n_freq: int = 16
    sigma2: float = 50.0
    depth: int = 2
    hidden_width: int = 32
    leaf_res: float = 0.1
    t_min: float = 0.5
    max_range: float = 60.0
    init_std: float = 0.01
    mask_res: float = 0.4
    mask_dilation: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.type == "int":
                if isinstance(value, float) and value.is_integer():
                    value = int(value)
                if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                    raise InvalidConfig(f"{f.name} must be an integer, got {value!r}")
                setattr(self, f.name, int(value))
            else:
                setattr(self, f.name, float(value))
        c = self
        if not (c.tau > 0 and c.tau_s > 0):
            raise InvalidConfig("tau and tau_s must be positive")
        if c.n_surface < 0 or c.n_free < 0 or c.n_surface + c.n_free == 0:
            raise InvalidConfig("n_surface and n_free must be >= 0 and not both zero")
        if c.levels < 1 or c.max_level < c.levels:
            raise InvalidConfig("need levels >= 1 and max_level >= levels")
        if c.feature_dim < 1 or c.n_freq < 1 or c.hidden_width < 1 or c.depth < 0:
            raise InvalidConfig("feature_dim, n_freq, hidden_width must be >= 1 and depth >= 0")
        if c.batch_rays < 1 or c.iterations < 0 or c.seed < 0:
            raise InvalidConfig("batch_rays >= 1, iterations >= 0 and seed >= 0 required")
        if not (c.sigma2 > 0 and c.leaf_res > 0 and c.mask_res > 0 and c.init_std >= 0):
            raise InvalidConfig("sigma2, leaf_res, mask_res must be positive")
        if not (0 <= c.t_min < c.max_range):
            raise InvalidConfig("need 0 <= t_min < max_range")
        if c.mask_dilation < 0:
            raise InvalidConfig("mask_dilation must be >= 0")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


@dataclass
class TrainingSample:
    point: np.ndarray
    sdf_label: float
    kind: str


def sdf_label(t, depth, tau):
    """Projected distance ``t - depth`` clamped to ``[-tau, tau]``."""
    return np.clip(np.asarray(t, dtype=np.float64) - depth, -tau, tau)


def min_valid_depth(cfg: TrainConfig) -> float:
    """Rays at or below this range cannot host both sample kinds."""
    return cfg.tau + (cfg.t_min if cfg.n_free else 0.0)


def sample_rays(origins, directions, depths, cfg: TrainConfig, rng):
    """Vectorized sampler for a batch of rays.

    Returns points ``(n, k, 3)``, labels ``(n, k)`` and a boolean
    ``near`` mask ``(k,)`` with ``k = n_surface + n_free``; the first
    ``n_surface`` columns are near-surface samples.
    """
    depths = np.asarray(depths, dtype=np.float64)
    n = depths.shape[0]
    t_near = rng.uniform(depths - cfg.tau, depths + cfg.tau, size=(cfg.n_surface, n)).T
    t_free = rng.uniform(cfg.t_min, depths - cfg.tau, size=(cfg.n_free, n)).T
    t = np.concatenate([t_near, t_free], axis=1)
    points = origins[:, None, :] + t[:, :, None] * directions[:, None, :]
    labels = sdf_label(t, depths[:, None], cfg.tau)
    near = np.arange(t.shape[1]) < cfg.n_surface
    return points, labels, near


def sample_ray(ray: Ray, cfg: TrainConfig, rng) -> list[TrainingSample]:
    if ray.depth <= min_valid_depth(cfg):
        raise DegenerateRay(f"ray depth {ray.depth:.3f} m too short for tau={cfg.tau}, t_min={cfg.t_min}")
    points, labels, near = sample_rays(
        ray.origin[None, :], ray.direction[None, :], np.array([ray.depth]), cfg, rng
    )
    return [
        TrainingSample(points[0, k], float(labels[0, k]), NEAR_SURFACE if near[k] else FREE_SPACE)
        for k in range(points.shape[1])
    ]


def bce_loss(sdf_pred, sdf_gt, tau_s):
    """Binary cross-entropy between sigmoid-squashed SDFs.

    ``o = sigmoid(s / tau_s)`` for both prediction and label;
    ``loss = -(o_gt log o_pred + (1 - o_gt) log(1 - o_pred))``, evaluated in
    the overflow-free logit form. Returns ``(loss, dloss/dsdf_pred)``
    element-wise.
    """
    z = np.asarray(sdf_pred, dtype=np.float64) / tau_s
    o_gt = _sigmoid(np.asarray(sdf_gt, dtype=np.float64) / tau_s)
    loss = np.logaddexp(0.0, z) - o_gt * z
    grad = (_sigmoid(z) - o_gt) / tau_s
    if np.ndim(loss) == 0:
        return float(loss), float(grad)
    return loss, grad


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class SdfModel:
    """Tri-quadtree features + positional encoding + MLP decoder."""

    def __init__(self, features: FeaturePlaneSet, encoder: PositionalEncoder, decoder: MlpDecoder):
        if decoder.input_dim != features.feature_dim + encoder.dim:
            raise InvalidConfig("decoder input width does not match feature and encoding sizes")
        self.features = features
        self.encoder = encoder
        self.decoder = decoder

    @classmethod
    def init(cls, extent: Extent, cfg: TrainConfig) -> SdfModel:
        features = FeaturePlaneSet(extent, cfg.feature_dim, cfg.levels, cfg.init_std)
        encoder = PositionalEncoder.init(cfg.n_freq, cfg.sigma2, cfg.seed)
        decoder = MlpDecoder.init(
            features.feature_dim + encoder.dim, cfg.hidden_width, cfg.depth, cfg.seed + 1
        )
        return cls(features, encoder, decoder)

    @property
    def extent(self) -> Extent:
        return self.features.extent

    def embed(self, points, rng=None):
        """``Phi(p) = [V(p), gamma(p)]`` and the interpolation record."""
        V, rec = self.features.query(points, rng)
        return np.concatenate([V, self.encoder.encode(points)], axis=1), rec

    def predict(self, points, chunk: int = 65536) -> np.ndarray:
        """SDF at ``points``; NaN outside the extent."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.full(points.shape[0], np.nan)
        inside = np.flatnonzero(self.extent.contains(points))
        for lo in range(0, inside.size, chunk):
            idx = inside[lo:lo + chunk]
            phi, _ = self.embed(points[idx])
            out[idx] = self.decoder.forward(phi)[0]
        return out

    __call__ = predict

    def parameter_counts(self) -> dict:
        feat = self.features.parameter_count()
        mlp = self.decoder.parameter_count()
        return {"features": feat, "mlp": mlp, "total": feat + mlp}


def batch_loss(model: SdfModel, points, labels, cfg: TrainConfig, rng=None):
    """Mean BCE over a batch; gradients land in the model's buffers.

    Feature gradients are accumulated into the feature tables; the MLP
    gradients are returned (parallel to ``decoder.parameters()``).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    phi, rec = model.embed(points, rng)
    pred, cache = model.decoder.forward(phi)
    losses, dpred = bce_loss(pred, labels, cfg.tau_s)
    n = labels.size
    loss = float(losses.sum() / n)
    if not np.isfinite(loss):
        raise NonFiniteLoss(
            f"non-finite loss; |pred| max {np.nanmax(np.abs(pred)):.3g}, "
            f"non-finite preds {int(np.sum(~np.isfinite(pred)))}"
        )
    grads, dphi = model.decoder.backward(cache, dpred / n)
    model.features.accumulate_gradient(rec, dphi[:, : model.features.feature_dim])
    return loss, grads, pred


@dataclass
class Checkpoint:
    config: TrainConfig
    model: SdfModel
    step: int = 0
    occupancy: OccupancyMask | None = field(default=None, compare=False)
    losses: list = field(default_factory=list, compare=False)

    @property
    def extent(self) -> Extent:
        return self.model.extent

    def to_bytes(self) -> bytes:
        return serialize_checkpoint(self)

    def __eq__(self, other):
        return isinstance(other, Checkpoint) and self.to_bytes() == other.to_bytes()


def rays_from_endpoints(origins, endpoints, cfg: TrainConfig):
    """World rays ``(origins, directions, depths)`` with unusable ones dropped.

    Drops returns beyond ``max_range`` and those too short to host both
    sample kinds. Also returns the number dropped.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    endpoints = np.asarray(endpoints, dtype=np.float64).reshape(-1, 3)
    delta = endpoints - origins
    depths = np.sqrt(np.einsum("ij,ij->i", delta, delta))
    keep = (depths <= cfg.max_range) & (depths > min_valid_depth(cfg))
    dirs = delta[keep] / depths[keep, None]
    return origins[keep], dirs, depths[keep], int(np.sum(~keep))


def train_rays(origins, endpoints, cfg: TrainConfig, extent: Extent | None = None,
               log_every: int = 100) -> Checkpoint:
    """Optimize a fresh model on world-frame rays given as origin/endpoint pairs."""
    origins, dirs, depths, dropped = rays_from_endpoints(origins, endpoints, cfg)
    if depths.size == 0:
        raise InvalidConfig("no usable rays after range filtering")
    if dropped:
        log.info("dropped %d rays outside (%.2f, %.1f] m", dropped, min_valid_depth(cfg), cfg.max_range)
    if extent is None:
        ends = origins + dirs * (depths[:, None] + cfg.tau)
        extent = Extent.enclosing(
            np.vstack([origins, ends]), cfg.leaf_res, cfg.max_level, pad=cfg.tau
        )
    model = SdfModel.init(extent, cfg)
    rng = np.random.default_rng(cfg.seed + 2)
    cells = []
    losses = []
    decoder = model.decoder
    for it in range(cfg.iterations):
        idx = rng.integers(0, depths.size, size=cfg.batch_rays)
        points, labels, _ = sample_rays(origins[idx], dirs[idx], depths[idx], cfg, rng)
        points = points.reshape(-1, 3)
        loss, grads, _ = batch_loss(model, points, labels, cfg, rng)
        decoder.step += 1
        decoder.adam_step(grads, cfg.lr_mlp, cfg.beta1, cfg.beta2, cfg.adam_eps, step=decoder.step)
        model.features.adam_step(decoder.step, cfg.lr_features, cfg.beta1, cfg.beta2, cfg.adam_eps)
        cells.append(np.unique(np.floor(points / cfg.mask_res).astype(np.int64), axis=0))
        if len(cells) >= 64:
            cells = [np.unique(np.concatenate(cells), axis=0)]
        losses.append(loss)
        if log_every and (it + 1) % log_every == 0:
            log.info("iter %d/%d  loss %.5f  features %d", it + 1, cfg.iterations, float(np.mean(losses[-log_every:])),
                     model.features.entry_count())
    occ = np.unique(np.concatenate(cells), axis=0) if cells else np.zeros((0, 3), dtype=np.int64)
    return Checkpoint(cfg, model, decoder.step, OccupancyMask(cfg.mask_res, occ, cfg.mask_dilation), losses)


def train(scans, cfg: TrainConfig, extent: Extent | None = None, log_every: int = 100) -> Checkpoint:
    """Optimize a fresh model on a :class:`~triquad.datasets.ScanSet`."""
    if len(scans) == 0:
        raise InvalidConfig("need at least one scan")
    origins, endpoints = scans.world_rays()
    return train_rays(origins, endpoints, cfg, extent, log_every)


# ---------------------------------------------------------------- checkpoint io

def _config_block(cfg: TrainConfig) -> bytes:
    parts = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        parts.append(struct.pack("<Q", value) if f.type == "int" else struct.pack("<d", value))
    return b"".join(parts)


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    cfg, model = ckpt.config, ckpt.model
    out = [MAGIC, struct.pack("<I", VERSION), _config_block(cfg)]
    ext = model.extent
    out.append(struct.pack("<4d", *ext.origin, ext.side))
    freqs = model.encoder.frequencies
    out.append(struct.pack("<I", freqs.size))
    out.append(freqs.astype("<f8").tobytes())
    d = model.features.dim
    rec = np.dtype([("key", "<u8"), ("feat", "<f4", (d,))])
    for plane, level, keys, feats in model.features.entries():
        out.append(struct.pack("<BBQ", PLANES.index(plane), level, keys.size))
        arr = np.empty(keys.size, dtype=rec)
        arr["key"] = keys
        arr["feat"] = feats
        out.append(arr.tobytes())
    dec = model.decoder
    out.append(struct.pack("<I", len(dec.weights)))
    for w, b in zip(dec.weights, dec.biases):
        out.append(struct.pack("<II", *w.shape))
        out.append(w.astype("<f8").tobytes())
        out.append(b.astype("<f8").tobytes())
    out.append(struct.pack("<Q", ckpt.step))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"checkpoint truncated: needed {n} bytes", offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype)


def deserialize_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CorruptMagic("not a checkpoint (bad magic)", offset=0)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}", offset=4)
    values = {}
    for f in dataclasses.fields(TrainConfig):
        (values[f.name],) = r.unpack("<Q" if f.type == "int" else "<d")
    cfg = TrainConfig(**values)
    ox, oy, oz, side = r.unpack("<4d")
    extent = Extent(np.array([ox, oy, oz]), cfg.leaf_res, cfg.max_level)
    if side != extent.side:
        raise FormatError(f"extent side {side} inconsistent with leaf_res/max_level", offset=r.pos - 8)
    (m,) = r.unpack("<I")
    encoder = PositionalEncoder(r.array("<f8", m).astype(np.float64), cfg.sigma2, cfg.seed)
    features = FeaturePlaneSet(extent, cfg.feature_dim, cfg.levels, cfg.init_std)
    d = cfg.feature_dim
    rec = np.dtype([("key", "<u8"), ("feat", "<f4", (d,))])
    for _ in range(len(features.table_order)):
        start = r.pos
        plane_id, level, count = r.unpack("<BBQ")
        if plane_id >= len(PLANES) or (PLANES[plane_id], level) not in features.tables:
            raise FormatError(f"unexpected table (plane {plane_id}, level {level})", offset=start)
        arr = r.array(rec, count)
        features.tables[PLANES[plane_id], level].set_entries(arr["key"], arr["feat"].astype(np.float64))
    (n_layers,) = r.unpack("<I")
    weights, biases = [], []
    for _ in range(n_layers):
        rows, cols = r.unpack("<II")
        weights.append(r.array("<f8", rows * cols).reshape(rows, cols).astype(np.float64))
        biases.append(r.array("<f8", rows).astype(np.float64))
    (step,) = r.unpack("<Q")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after checkpoint", offset=r.pos)
    decoder = MlpDecoder(weights, biases)
    decoder.step = step
    return Checkpoint(cfg, SdfModel(features, encoder, decoder), step)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(serialize_checkpoint(ckpt))
    if ckpt.occupancy is not None:
        ckpt.occupancy.save(mask_path_for(path))


def load_checkpoint(path, with_mask: bool = True) -> Checkpoint:
    ckpt = deserialize_checkpoint(Path(path).read_bytes())
    mpath = mask_path_for(path)
    if with_mask and mpath.exists():
        ckpt.occupancy = OccupancyMask.load(mpath)
    return ckpt


def mask_path_for(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.name + ".mask")
