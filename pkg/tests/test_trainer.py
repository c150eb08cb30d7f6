import csv
import json
import math

import numpy as np
import pytest

from svdrestore import autodiff as ad
from svdrestore.autodiff import SvaoLayer, SveoLayer
from svdrestore.trainer import (
    LOG_FIELDS, CheckpointError, ToyBackbone, TrainConfig, TrainingDiverged, ablate, cosine_lr, evaluate,
    heldout_pairs, load_model, offdiag_energy, orthogonality_drive, psnr, read_checkpoint, save_checkpoint,
    ssim, sveo_block_indices, train,
)

TINY = dict(patch=16, batch=2, width=4, depth=2, source_size=24, train_images=4, eval_patches=4,
            eval_every=0, tasks=[{"kind": "GaussianNoise", "params": {"sigma": 25}},
                                 {"kind": "LowLight", "params": {"s": 0.3}}])


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


def test_psnr_examples(rng):
    a = rng.random((8, 8, 3))
    assert math.isinf(psnr(a, a))
    b = np.full((16, 16, 3), 0.2)
    assert psnr(b + 0.1, b) == pytest.approx(20.0)


def test_ssim_identity_and_skimage(rng):
    metrics = pytest.importorskip("skimage.metrics")
    a = rng.random((32, 40, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    ref = metrics.structural_similarity(a, b, data_range=1.0, channel_axis=2, gaussian_weights=True,
                                        sigma=1.5, use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)
    with pytest.raises(ValueError):
        ssim(a, a[:, :20])


def test_cosine_schedule():
    lrs = [cosine_lr(2e-4, s, 100) for s in range(101)]
    assert lrs[0] == 2e-4
    assert abs(lrs[-1]) <= 1e-12
    assert all(x >= y for x, y in zip(lrs, lrs[1:]))


def test_config_validation(tmp_path):
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"patch": 48, "learning_rate": 1})
    with pytest.raises(ValueError, match="divisible"):
        TrainConfig(patch=30)
    with pytest.raises(ValueError):
        TrainConfig(flow="serial")
    with pytest.raises(ValueError):
        TrainConfig(tasks=[{"kind": "Snow"}])
    cfg = TrainConfig(steps=5, weights={"beta": 0.02, "lambda_orth": 0.0, "lambda_dec": 0.1})
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_json(path) == cfg
    assert TrainConfig.from_dict({}) == TrainConfig()


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.patch, cfg.batch, cfg.lr, cfg.beta1, cfg.beta2) == (48, 8, 2e-4, 0.9, 0.999)
    assert (cfg.weights.beta, cfg.weights.lambda_orth, cfg.weights.lambda_dec) == (0.01, 1e-4, 0.1)


@pytest.mark.parametrize("depth", [1, 2, 5, 6, 7])
def test_backbone_layout(depth):
    m = ToyBackbone(TrainConfig(depth=depth, width=4))
    assert len(sveo_block_indices(depth)) == math.ceil(depth / 2)
    assert len(m.sveo_layers()) == math.ceil(depth / 2)
    assert len(m.svao_layers()) == 1
    assert m.blocks[m.bottleneck].svao is not None


def test_backbone_toggles_and_shape(rng):
    base = ToyBackbone(TrainConfig(width=4, sveo=False, svao=False))
    assert not base.sveo_layers() and not base.svao_layers()
    for flow in ("cascaded", "parallel", "cascaded+parallel"):
        m = ToyBackbone(TrainConfig(width=4, flow=flow))
        out = m.restore(rng.random((2, 16, 16, 3)).astype(np.float32))
        assert out.shape == (2, 16, 16, 3) and out.min() >= 0 and out.max() <= 1


def test_steps_zero_is_init(tmp_path):
    cfg = tiny(steps=0)
    res = train(cfg, out=tmp_path / "a.ckpt", log_path=tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().strip() == ",".join(LOG_FIELDS)
    _, tensors = read_checkpoint(tmp_path / "a.ckpt")
    for name, t in ToyBackbone(cfg).parameters():
        np.testing.assert_array_equal(tensors[name], t.data)
    assert res.log_rows == []


def test_training_is_bitwise_deterministic(tmp_path):
    cfg = tiny(steps=3, eval_every=3)
    train(cfg, out=tmp_path / "a.ckpt", log_path=tmp_path / "a.csv")
    train(cfg, out=tmp_path / "b.ckpt", log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert {r["task"] for r in rows} == {"GaussianNoise", "LowLight"}
    assert rows[-1]["psnr"] != ""
    other = tiny(steps=3, seed=1)
    train(other, out=tmp_path / "c.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() != (tmp_path / "c.ckpt").read_bytes()


def test_checkpoint_round_trip_idempotent(tmp_path):
    cfg = tiny()
    m = ToyBackbone(cfg)
    first = save_checkpoint(m, tmp_path / "a.ckpt", cfg.to_dict())
    loaded, cfg2 = load_model(tmp_path / "a.ckpt")
    second = save_checkpoint(loaded, tmp_path / "b.ckpt", cfg2.to_dict())
    assert first == second
    manifest, _ = read_checkpoint(tmp_path / "a.ckpt")
    offsets = [e["offset"] for e in manifest["tensors"]]
    sizes = [e["nbytes"] for e in manifest["tensors"]]
    assert offsets == list(np.cumsum([0] + sizes[:-1]))


def test_checkpoint_corruption(tmp_path):
    save_checkpoint(ToyBackbone(tiny()), tmp_path / "a.ckpt")
    blob = bytearray((tmp_path / "a.ckpt").read_bytes())
    blob[-10] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="CRC"):
        read_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + bytes(blob[8:]))
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "short.ckpt").write_bytes(bytes(blob[:20]))
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "short.ckpt")


def test_checkpoint_model_mismatch(tmp_path):
    from svdrestore.trainer import load_into
    save_checkpoint(ToyBackbone(tiny()), tmp_path / "a.ckpt")
    _, tensors = read_checkpoint(tmp_path / "a.ckpt")
    with pytest.raises(CheckpointError):
        load_into(ToyBackbone(tiny(width=8)), tensors)


def test_evaluate_table(rng):
    cfg = tiny()
    m = ToyBackbone(cfg)
    pairs = heldout_pairs(cfg)
    assert len(pairs) == cfg.eval_patches
    table = evaluate(m, pairs)
    assert set(table) == {"GaussianNoise", "LowLight", "all"}
    assert table["all"]["n"] == 4
    with pytest.raises(ValueError):
        evaluate(m, [("x", np.zeros((16, 16, 3)), np.zeros((16, 12, 3)))])


def test_divergence_guard(monkeypatch):
    real = ad.loss_total

    def poisoned(*a, **kw):
        total, parts = real(*a, **kw)
        parts["total"] = float("nan")
        return total, parts

    monkeypatch.setattr(ad, "loss_total", poisoned)
    with pytest.raises(TrainingDiverged, match="step 0"):
        train(tiny(steps=2))


def test_ablate_matrix():
    rows = ablate(tiny(steps=1), ["sveo", "l_dec"])
    assert len(rows) == 4
    assert {(r["sveo"], r["l_dec"]) for r in rows} == {(True, True), (True, False), (False, True), (False, False)}
    assert len({r["seed"] for r in rows}) == 1
    with pytest.raises(ValueError):
        ablate(tiny(steps=1), ["dropout"])


def test_orthogonality_drive():
    before, after = orthogonality_drive(TrainConfig(width=4, depth=4), steps=1000)
    assert min(before) > 1e-3
    assert max(after) <= 1e-6


def test_offdiag_energy():
    assert offdiag_energy(np.eye(3)) == 0
    assert offdiag_energy(np.array([[1.0, 1.0], [0.0, 1.0]])) == pytest.approx(2.0)
