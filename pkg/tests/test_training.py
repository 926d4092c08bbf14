"""Training loop tests: loss composition, adversarial example properties,
phase accounting, eps sampler uniformity, augmentation, checkpointing, and
deterministic resume."""

import math
import re

import numpy as np
import pytest
from scipy import stats

from forgeloc import checkpoint as ckpt_io
from forgeloc import dataforge as df
from forgeloc.autograd import Tensor, no_grad
from forgeloc.network import CoarseToFineModel, ModelConfig
from forgeloc.training import (SatConfig, Trainer, apply_augment, fgsm,
                               sample_eps, total_loss)


def make_data(n, size, seed0):
    samples = [df.generate_sample(df.KINDS[i % 3], seed=seed0 + i, size=size)
               for i in range(n)]
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask[None] for s in samples])
    return images, masks


def small_model(seed=0, size=(32, 32), nbf=4, cpb=1, **kw):
    cfg = ModelConfig(nbf=nbf, k=4, convs_per_block=cpb, input_size=size, **kw)
    return CoarseToFineModel(cfg, seed=seed)


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    """8 samples, nbf=8, SAT on: trained until it memorizes the batch."""
    log_path = tmp_path_factory.mktemp("train") / "train.log"
    images, masks = make_data(8, (32, 32), seed0=100)
    cfg = ModelConfig(nbf=8, k=8, convs_per_block=2, input_size=(32, 32))
    model = CoarseToFineModel(cfg, seed=1)
    trainer = Trainer(model, SatConfig(iterations=150, batch_size=8,
                                       rng_seed=1), log_path=str(log_path))
    trainer.train(images, masks)
    return trainer, images, masks, log_path


# ---------------------------------------------------------------------------
# loss

def test_total_loss_frozen_values():
    target = (np.arange(16).reshape(1, 1, 4, 4) % 2).astype(np.float64)
    perfect = Tensor(target.copy())
    half = Tensor(np.full_like(target, 0.5))
    assert total_loss(target, perfect, Tensor(target.copy())).item() <= 2.4e-6
    assert total_loss(target, half, Tensor(np.full_like(target, 0.5))).item() \
        == pytest.approx(2 * math.log(2), rel=1e-9)
    assert total_loss(target, perfect, half).item() \
        == pytest.approx(math.log(2), rel=1e-6)


def test_total_loss_without_coarse_term():
    target = np.ones((1, 1, 2, 2))
    half = Tensor(np.full((1, 1, 2, 2), 0.5))
    assert total_loss(target, None, half).item() \
        == pytest.approx(math.log(2), rel=1e-9)


def test_total_loss_shape_mismatch():
    target = np.ones((1, 1, 4, 4))
    with pytest.raises(ValueError, match="shape"):
        total_loss(target, Tensor(np.ones((1, 1, 2, 2))),
                   Tensor(np.ones((1, 1, 4, 4))))


# ---------------------------------------------------------------------------
# fgsm

def test_fgsm_zero_limit_noop():
    model = small_model(seed=2)
    images, masks = make_data(2, (32, 32), seed0=200)
    adv = fgsm(model, images, masks, 1e-20)
    np.testing.assert_allclose(adv, images, rtol=0, atol=1e-20)


def test_fgsm_step_magnitudes_and_budget():
    model = small_model(seed=3)
    images, masks = make_data(2, (32, 32), seed0=210)
    images = 0.2 + 0.6 * images      # keep clipping inactive
    eps = 0.01
    adv = fgsm(model, images, masks, eps)
    diff = adv.astype(np.float64) - images.astype(np.float64)
    tol = 1e-6
    assert np.abs(diff).max() <= eps + tol
    near = (np.abs(diff) < tol) | (np.abs(np.abs(diff) - eps) < tol)
    assert near.all()


def test_fgsm_respects_image_range():
    model = small_model(seed=4)
    images, masks = make_data(2, (32, 32), seed0=220)
    adv = fgsm(model, images, masks, 0.5)
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_fgsm_per_sample_eps():
    model = small_model(seed=5)
    images, masks = make_data(2, (32, 32), seed0=230)
    images = 0.2 + 0.6 * images
    eps = np.array([0.004, 0.009])
    adv = fgsm(model, images, masks, eps)
    diff = np.abs(adv.astype(np.float64) - images.astype(np.float64))
    assert diff[0].max() <= 0.004 + 1e-6
    assert diff[1].max() == pytest.approx(0.009, abs=1e-6)


def test_fgsm_leaves_parameters_untouched():
    model = small_model(seed=6)
    images, masks = make_data(2, (32, 32), seed0=240)
    before = [t.data.copy() for _, t in model.parameters()]
    fgsm(model, images, masks, 0.01)
    for (_, t), snap in zip(model.parameters(), before):
        np.testing.assert_array_equal(t.data, snap)
        assert t.grad is None or not t.grad.any()


def test_fgsm_ascends_loss_on_trained_model(overfit_run):
    trainer, _, _, _ = overfit_run
    model = trainer.model
    wins = 0
    trials = 20
    for i in range(trials):
        images, masks = make_data(1, (32, 32), seed0=900 + i)
        adv = fgsm(model, images, masks, 0.01)
        with no_grad():
            c0, r0 = model(Tensor(images))
            clean = total_loss(masks.astype(np.float32), c0, r0).item()
            c1, r1 = model(Tensor(adv))
            attacked = total_loss(masks.astype(np.float32), c1, r1).item()
        wins += attacked >= clean
    assert wins / trials >= 0.9


# ---------------------------------------------------------------------------
# eps sampler

def test_eps_in_half_open_interval():
    rng = np.random.default_rng(7)
    vals = sample_eps(rng, 100000, 0.01)
    assert vals.min() > 0.0
    assert vals.max() <= 0.01


def test_eps_uniform_kolmogorov_smirnov():
    # eps drawn across 1000 per-iteration streams behaves as U(0, 0.01)
    vals = []
    cfg = SatConfig(rng_seed=11)
    trainer = Trainer(small_model(seed=8), cfg)
    for n in range(1, 1001):
        vals.append(sample_eps(trainer._iteration_rng(n, 1), 1, 0.01)[0])
    stat = stats.kstest(vals, "uniform", args=(0, 0.01)).statistic
    assert stat < 0.05


# ---------------------------------------------------------------------------
# augmentation

def test_augment_involutions():
    rng = np.random.default_rng(9)
    image = rng.random((3, 8, 8)).astype(np.float32)
    mask = (rng.random((1, 8, 8)) > 0.5).astype(np.float32)
    i1, m1 = apply_augment(image, mask, True, False, 0)
    i2, m2 = apply_augment(i1, m1, True, False, 0)
    np.testing.assert_array_equal(i2, image)
    np.testing.assert_array_equal(m2, mask)
    i3, m3 = image, mask
    for _ in range(4):
        i3, m3 = apply_augment(i3, m3, False, False, 1)
    np.testing.assert_array_equal(i3, image)
    np.testing.assert_array_equal(m3, mask)


def test_augment_preserves_binary_mask_and_alignment():
    rng = np.random.default_rng(10)
    image = rng.random((3, 6, 6)).astype(np.float32)
    image[0, 2, 3] = 1.0
    mask = np.zeros((1, 6, 6), dtype=np.float32)
    mask[0, 2, 3] = 1.0
    for hflip in (False, True):
        for vflip in (False, True):
            for k in range(4):
                ai, am = apply_augment(image, mask, hflip, vflip, k)
                assert set(np.unique(am)) <= {0.0, 1.0}
                y, x = np.argwhere(am[0] == 1.0)[0]
                assert ai[0, y, x] == 1.0    # marker pixel moved with mask


# ---------------------------------------------------------------------------
# phase accounting

def test_step_counts_with_and_without_sat():
    images, masks = make_data(2, (32, 32), seed0=300)
    for sat, steps_per_iter in ((False, 1), (True, 2)):
        model = small_model(seed=11)
        trainer = Trainer(model, SatConfig(iterations=3, batch_size=2,
                                           rng_seed=3, sat_enabled=sat))
        trainer.train(images, masks)
        assert trainer.opt.step_count == 3 * steps_per_iter
        assert len(trainer.loss_history) == 3 * steps_per_iter
        assert trainer.iteration == 3


def test_nan_loss_aborts_with_iteration_index():
    images, masks = make_data(2, (32, 32), seed0=310)
    model = small_model(seed=12)
    model.coarse.mask_head.weight.data[:] = np.nan
    trainer = Trainer(model, SatConfig(iterations=1, batch_size=2, rng_seed=4))
    with pytest.raises(RuntimeError, match="iteration 1"):
        trainer.train(images, masks)


def test_empty_dataset_rejected():
    trainer = Trainer(small_model(seed=13), SatConfig())
    with pytest.raises(ValueError, match="nonempty"):
        trainer.train(np.zeros((0, 3, 32, 32)), np.zeros((0, 1, 32, 32)))


def test_sat_config_validation():
    with pytest.raises(ValueError, match="eps_max"):
        SatConfig(eps_max=0.0)
    with pytest.raises(ValueError, match="eps_max"):
        SatConfig(eps_max=1.5)
    with pytest.raises(ValueError, match="batch_size"):
        SatConfig(batch_size=0)


# ---------------------------------------------------------------------------
# overfit run

def test_overfit_loss_drops_90_percent(overfit_run):
    trainer, _, _, _ = overfit_run
    phase1 = trainer.loss_history[::2]
    assert len(trainer.loss_history) == 2 * trainer.iteration
    assert phase1[-1] <= 0.1 * phase1[0]


def test_log_format(overfit_run):
    trainer, _, _, log_path = overfit_run
    lines = log_path.read_text().strip().split("\n")
    assert len(lines) == len(trainer.loss_history)
    pattern = re.compile(r"^iter=(\d+) phase=([12]) eps=(-|[0-9.e-]+) "
                         r"loss=\d+\.\d+$")
    for i, line in enumerate(lines):
        m = pattern.match(line)
        assert m, f"bad log line: {line!r}"
        assert int(m.group(1)) == i // 2 + 1
        phase = int(m.group(2))
        assert phase == i % 2 + 1
        if phase == 1:
            assert m.group(3) == "-"
        else:
            eps = float(m.group(3))
            assert 0.0 < eps <= 0.01


# ---------------------------------------------------------------------------
# determinism and persistence

def test_full_run_determinism():
    images, masks = make_data(4, (32, 32), seed0=400)
    finals = []
    for _ in range(2):
        model = small_model(seed=21)
        trainer = Trainer(model, SatConfig(iterations=4, batch_size=2,
                                           rng_seed=5))
        trainer.train(images, masks)
        finals.append([t.data.copy() for _, t in model.parameters()])
    for a, b in zip(*finals):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_roundtrip_bitexact(tmp_path):
    model = small_model(seed=22)
    images, _ = make_data(1, (32, 32), seed0=500)
    path = tmp_path / "model.ckpt"
    ckpt_io.save_checkpoint(path, model)
    restored = ckpt_io.restore_model(ckpt_io.load_checkpoint(path))
    with no_grad():
        _, r0 = model(Tensor(images))
        _, r1 = restored(Tensor(images))
    np.testing.assert_array_equal(r0.data, r1.data)


def test_checkpoint_magic_guard(tmp_path):
    model = small_model(seed=23)
    path = tmp_path / "model.ckpt"
    ckpt_io.save_checkpoint(path, model)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(raw)
    with pytest.raises(ValueError, match="magic"):
        ckpt_io.load_checkpoint(path)


def test_checkpoint_version_guard(tmp_path):
    import struct
    model = small_model(seed=24)
    path = tmp_path / "model.ckpt"
    ckpt_io.save_checkpoint(path, model)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(raw)
    with pytest.raises(ValueError, match="version"):
        ckpt_io.load_checkpoint(path)


def test_checkpoint_truncation_guard(tmp_path):
    model = small_model(seed=25)
    path = tmp_path / "model.ckpt"
    ckpt_io.save_checkpoint(path, model)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) - 100])
    with pytest.raises(ValueError, match="truncated"):
        ckpt_io.load_checkpoint(path)


def test_resume_requires_optimizer_state(tmp_path):
    model = small_model(seed=26)
    path = tmp_path / "model.ckpt"
    ckpt_io.save_checkpoint(path, model)   # no optimizer
    with pytest.raises(ValueError, match="optimizer"):
        Trainer.load(path)


def test_resume_replays_uninterrupted_run(tmp_path):
    images, masks = make_data(4, (32, 32), seed0=600)

    def fresh_trainer():
        return Trainer(small_model(seed=27),
                       SatConfig(iterations=6, batch_size=2, rng_seed=6))

    straight = fresh_trainer()
    straight.train(images, masks)

    resumed = fresh_trainer()
    resumed.train(images, masks, iterations=3)
    path = tmp_path / "mid.ckpt"
    resumed.save(path)
    resumed2 = Trainer.load(path)
    assert resumed2.iteration == 3
    resumed2.train(images, masks)     # runs the remaining 3 iterations

    assert resumed2.iteration == straight.iteration == 6
    # the second half of the loss sequence replays exactly
    assert straight.loss_history[6:] == resumed2.loss_history[6:]
    for (na, ta), (nb, tb) in zip(straight.model.parameters(),
                                  resumed2.model.parameters()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)
