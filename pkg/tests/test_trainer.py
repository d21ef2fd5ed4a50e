import struct

import numpy as np
import pytest

from triquad.errors import CorruptMagic, DegenerateRay, FormatError, InvalidConfig, TruncatedFile, VersionMismatch
from triquad.geometry import Extent, Ray
from triquad.trainer import (
    FREE_SPACE,
    NEAR_SURFACE,
    Checkpoint,
    SdfModel,
    TrainConfig,
    batch_loss,
    bce_loss,
    deserialize_checkpoint,
    load_checkpoint,
    sample_ray,
    sample_rays,
    save_checkpoint,
    sdf_label,
    serialize_checkpoint,
    train_rays,
)


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.n_surface, cfg.n_free, cfg.levels, cfg.max_level, cfg.feature_dim) == (3, 3, 3, 12, 8)
    assert (cfg.n_freq, cfg.sigma2, cfg.depth, cfg.hidden_width) == (16, 50.0, 2, 32)
    assert TrainConfig(iterations=5.0).iterations == 5
    for bad in ({"tau": 0}, {"tau_s": -1}, {"n_surface": 0, "n_free": 0}, {"levels": 5, "max_level": 4},
                {"iterations": 2.5}):
        with pytest.raises(InvalidConfig):
            TrainConfig(**bad)


def test_sdf_label_examples():
    assert sdf_label(4.0, 4.0, 0.3) == 0.0
    assert sdf_label(3.9, 4.0, 0.3) == pytest.approx(-0.1)
    assert sdf_label(9.0, 4.0, 0.3) == 0.3


def test_sample_ray_counts_support_and_labels():
    cfg = TrainConfig()
    ray = Ray(np.zeros(3), np.array([0.0, 0.6, 0.8]), 5.0)
    samples = sample_ray(ray, cfg, np.random.default_rng(0))
    assert len(samples) == 6
    near = [s for s in samples if s.kind == NEAR_SURFACE]
    free = [s for s in samples if s.kind == FREE_SPACE]
    assert len(near) == 3 and len(free) == 3
    for s in near:
        t = float(np.dot(s.point, ray.direction))
        assert abs(t - ray.depth) <= cfg.tau + 1e-12
        assert -cfg.tau <= s.sdf_label <= cfg.tau
    for s in free:
        t = float(np.dot(s.point, ray.direction))
        assert cfg.t_min <= t <= ray.depth - cfg.tau + 1e-12
        assert s.sdf_label == -cfg.tau


def test_sample_ray_determinism_and_degenerate():
    cfg = TrainConfig()
    ray = Ray(np.ones(3), np.array([1.0, 0, 0]), 3.0)
    a = sample_ray(ray, cfg, np.random.default_rng(9))
    b = sample_ray(ray, cfg, np.random.default_rng(9))
    assert all(np.array_equal(x.point, y.point) and x.sdf_label == y.sdf_label for x, y in zip(a, b))
    with pytest.raises(DegenerateRay):
        sample_ray(Ray(np.zeros(3), np.array([1.0, 0, 0]), 0.25), cfg, np.random.default_rng(0))


def test_batch_labels_invariants():
    cfg = TrainConfig()
    rng = np.random.default_rng(2)
    n = 2000
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    depths = rng.uniform(0.9, 50, size=n)
    _, labels, near = sample_rays(np.zeros((n, 3)), d, depths, cfg, rng)
    assert np.all(np.abs(labels[:, near]) <= cfg.tau)
    assert np.all(labels[:, ~near] == -cfg.tau)


def test_bce_examples():
    loss, grad = bce_loss(0.0, 0.0, 0.05)
    assert loss == pytest.approx(np.log(2), abs=1e-12) and grad == 0.0
    for gt in (-0.2, 0.0, 0.13):
        _, grad = bce_loss(gt, gt, 0.05)
        assert abs(grad) < 1e-15
        # minimum over predictions is at the label
        grid = np.linspace(gt - 0.1, gt + 0.1, 201)
        assert np.argmin(bce_loss(grid, np.full_like(grid, gt), 0.05)[0]) == 100
    o_pred = 1 / (1 + np.exp(0.3 / 0.05))
    o_gt = 1 / (1 + np.exp(-0.3 / 0.05))
    expect = -(o_gt * np.log(o_pred) + (1 - o_gt) * np.log(1 - o_pred))
    loss, grad = bce_loss(-0.3, 0.3, 0.05)
    assert loss == pytest.approx(expect, rel=1e-12)
    assert grad == pytest.approx((o_pred - o_gt) / 0.05, rel=1e-12)


def _tiny_model(seed):
    cfg = TrainConfig(feature_dim=2, levels=2, n_freq=2, hidden_width=5, max_level=6, leaf_res=0.25,
                      seed=seed, init_std=0.3)
    ext = Extent(np.full(3, -8.0), cfg.leaf_res, cfg.max_level)
    model = SdfModel.init(ext, cfg)
    rng = np.random.default_rng(seed)
    for b in model.decoder.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    pts = rng.uniform(-2, 2, size=(6, 3))
    labels = rng.uniform(-0.3, 0.3, size=6)
    model.features.allocate(pts, rng)
    return cfg, model, pts, labels


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_full_pipeline_gradient_check(seed):
    cfg, model, pts, labels = _tiny_model(seed)
    model.features.zero_grad()
    _, grads, _ = batch_loss(model, pts, labels, cfg)
    feat_grads = {k: t.grad[: len(t)].copy() for k, t in model.features.tables.items()}
    h = 1e-5

    def loss():
        return batch_loss(model, pts, labels, cfg)[0]

    for p, g in zip(model.decoder.parameters(), grads):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = loss()
            p[idx] = orig - h
            down = loss()
            p[idx] = orig
            assert _rel((up - down) / (2 * h), g[idx]) < 1e-4
    for key, table in model.features.tables.items():
        for row in range(len(table)):
            for k in range(table.dim):
                orig = table.features[row, k]
                table.features[row, k] = orig + h
                up = loss()
                table.features[row, k] = orig - h
                down = loss()
                table.features[row, k] = orig
                assert _rel((up - down) / (2 * h), feat_grads[key][row, k]) < 1e-4


def test_fixed_batch_loss_mostly_decreases():
    cfg, model, pts, labels = _tiny_model(4)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-2, 2, size=(64, 3))
    labels = np.clip(pts[:, 2] * 0.5, -0.3, 0.3)
    losses = []
    for step in range(1, 52):
        loss, grads, _ = batch_loss(model, pts, labels, cfg, rng)
        model.decoder.adam_step(grads, cfg.lr_mlp, step=step)
        model.features.adam_step(step, cfg.lr_features, cfg.beta1, cfg.beta2, cfg.adam_eps)
        losses.append(loss)
    decreasing = sum(b <= a for a, b in zip(losses, losses[1:]))
    assert decreasing >= 45


def _wall_rays(n, rng, x_wall=3.0):
    d = rng.normal(size=(n, 3))
    d[:, 0] = np.abs(d[:, 0]) + 1.0
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origins = np.tile([0.0, 0.0, 1.0], (n, 1))
    return origins, origins + d * (x_wall / d[:, [0]])


def test_zero_iterations_equals_initialization():
    origins, ends = _wall_rays(200, np.random.default_rng(0))
    cfg = TrainConfig(iterations=0)
    ckpt = train_rays(origins, ends, cfg)
    fresh = SdfModel.init(ckpt.extent, cfg)
    assert ckpt.to_bytes() == Checkpoint(cfg, fresh, 0).to_bytes()


def test_single_wall_fit():
    rng = np.random.default_rng(0)
    origins, ends = _wall_rays(20_000, rng)
    cfg = TrainConfig(iterations=500, batch_rays=256)
    ckpt = train_rays(origins, ends, cfg, log_every=0)
    held_o, held_e = _wall_rays(2000, np.random.default_rng(99))
    delta = held_e - held_o
    depth = np.linalg.norm(delta, axis=1)
    pts, labels, _ = sample_rays(held_o, delta / depth[:, None], depth, cfg, np.random.default_rng(5))
    pred = ckpt.model.predict(pts.reshape(-1, 3))
    err = np.abs(pred - labels.ravel())
    assert err.mean() < cfg.tau / 3


def _small_ckpt(seed=0, iterations=5):
    origins, ends = _wall_rays(500, np.random.default_rng(seed))
    return train_rays(origins, ends, TrainConfig(iterations=iterations, batch_rays=64, seed=seed), log_every=0)


def test_checkpoint_round_trip(tmp_path):
    ckpt = _small_ckpt()
    path = tmp_path / "a.3qf"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.to_bytes() == path.read_bytes()
    assert loaded.model.parameter_counts() == ckpt.model.parameter_counts()
    assert loaded.step == ckpt.step == 5
    assert np.array_equal(loaded.occupancy.cells, ckpt.occupancy.cells)


def test_checkpoint_header_layout():
    data = _small_ckpt().to_bytes()
    assert data[:4] == b"3QFP"
    assert struct.unpack_from("<I", data, 4) == (1,)
    n_fields = len(TrainConfig.field_names())
    (m,) = struct.unpack_from("<I", data, 8 + 8 * n_fields + 32)
    assert m == 16


def test_checkpoint_errors():
    data = _small_ckpt().to_bytes()
    with pytest.raises(CorruptMagic):
        deserialize_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(VersionMismatch):
        deserialize_checkpoint(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(TruncatedFile):
        deserialize_checkpoint(data[:-3])
    with pytest.raises(FormatError):
        deserialize_checkpoint(data + b"\0")


def test_training_is_deterministic():
    assert _small_ckpt(3).to_bytes() == _small_ckpt(3).to_bytes()
    assert _small_ckpt(3).to_bytes() != _small_ckpt(4).to_bytes()


def test_allocation_monotone_during_training():
    origins, ends = _wall_rays(500, np.random.default_rng(1))
    counts = [train_rays(origins, ends, TrainConfig(iterations=it, batch_rays=32), log_every=0)
              .model.features.entry_count() for it in (1, 2, 4, 8)]
    assert counts == sorted(counts)


def test_occupancy_covers_training_samples():
    ckpt = _small_ckpt(iterations=3)
    mask = ckpt.occupancy
    assert len(mask) > 0
    assert np.all(mask.contains(mask.cells * mask.cell_size + 0.5 * mask.cell_size))
