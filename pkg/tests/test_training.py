import json

import numpy as np
import pytest
import torch

from provo.nets import (
    DiscriminatorConfig,
    GeneratorConfig,
    FrozenModelError,
    build_discriminator,
    build_generator,
    freeze,
    weights_digest,
)
from provo.training import (
    LossWeights,
    TrainConfig,
    TrainingDiverged,
    discriminator_loss,
    generator_adv_loss,
    lr_schedule,
    pixel_loss,
    train_2d_model,
)

TINY_GEN = GeneratorConfig(in_channels=1, filters=(2, 3, 4), n_res_blocks=0)
TINY_DISC = DiscriminatorConfig(in_channels=2, filters=(2, 3, 4, 5))


def make_pairs(n, seed=0, hw=24):
    """Identity task: target equals the input channel."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        y = rng.uniform(0, 1, size=(1, hw, hw)).astype(np.float32)
        pairs.append((y.copy(), y))
    return pairs


def test_lr_schedule_pinned_values():
    cfg = TrainConfig(epochs=100, lr_base=2e-4, decay_start=50)
    assert lr_schedule(0, cfg) == 2e-4
    assert lr_schedule(49, cfg) == 2e-4
    assert lr_schedule(50, cfg) == 2e-4
    assert lr_schedule(75, cfg) == pytest.approx(1e-4)
    assert lr_schedule(99, cfg) == pytest.approx(4e-6)
    # final epoch sits at lr_base / (epochs - decay_start)
    assert lr_schedule(99, cfg) <= cfg.lr_base / 50


def test_lr_schedule_monotone_and_bounds():
    cfg = TrainConfig(epochs=20, lr_base=1e-3, decay_start=10)
    values = [lr_schedule(e, cfg) for e in range(cfg.epochs)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(v > 0 for v in values)
    with pytest.raises(ValueError):
        lr_schedule(20, cfg)
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)
    # decay_start == epochs keeps the rate constant throughout
    flat = TrainConfig(epochs=5, decay_start=5)
    assert [lr_schedule(e, flat) for e in range(5)] == [flat.lr_base] * 5


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, decay_start=11)
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, decay_start=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_base=0)
    with pytest.raises(ValueError):
        LossWeights(lambda_pix=-1)


def test_loss_values_match_hand_computation():
    d_real = torch.tensor([0.8, 1.2])
    d_fake = torch.tensor([0.1, -0.3])
    expect_d = np.mean((np.array([0.8, 1.2]) - 1) ** 2) + np.mean(np.array([0.1, -0.3]) ** 2)
    assert discriminator_loss(d_real, d_fake).item() == pytest.approx(expect_d)
    expect_g = np.mean((np.array([0.1, -0.3]) - 1) ** 2)
    assert generator_adv_loss(d_fake).item() == pytest.approx(expect_g)
    a = torch.tensor([[0.0, 1.0], [2.0, 3.0]])
    b = torch.tensor([[1.0, 1.0], [1.0, 1.0]])
    assert pixel_loss(a, b).item() == pytest.approx((1 + 0 + 1 + 2) / 4)


def test_training_reduces_pixel_loss():
    torch.manual_seed(0)
    gen = build_generator(TINY_GEN, seed=1)
    disc = build_discriminator(TINY_DISC, seed=2)
    pairs = make_pairs(6, seed=3)
    cfg = TrainConfig(epochs=4, lr_base=2e-4, decay_start=2, seed=0)
    result = train_2d_model(pairs, gen, disc, cfg)
    history = result.history
    assert len(history) == 4
    assert history[-1]["L_pix"] < history[0]["L_pix"]
    for key in ("epoch", "L_D", "L_G_adv", "L_pix", "lr"):
        assert key in history[0]


def test_training_is_deterministic():
    pairs = make_pairs(3, seed=5)
    digests = []
    for _ in range(2):
        gen = build_generator(TINY_GEN, seed=7)
        disc = build_discriminator(TINY_DISC, seed=8)
        train_2d_model(pairs, gen, disc, TrainConfig(epochs=2, decay_start=1, seed=4))
        digests.append(weights_digest(gen))
    assert digests[0] == digests[1]


def test_history_file_is_ndjson(tmp_path):
    gen = build_generator(TINY_GEN, seed=1)
    disc = build_discriminator(TINY_DISC, seed=2)
    path = tmp_path / "history.ndjson"
    val = make_pairs(2, seed=11)
    train_2d_model(make_pairs(2, seed=10), gen, disc,
                   TrainConfig(epochs=3, decay_start=2, seed=0),
                   val_pairs=val, history_path=path)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 3
    records = [json.loads(line) for line in lines]
    assert [r["epoch"] for r in records] == [0, 1, 2]
    assert all("val_psnr" in r for r in records)


def test_best_val_epoch_tracked():
    gen = build_generator(TINY_GEN, seed=1)
    disc = build_discriminator(TINY_DISC, seed=2)
    result = train_2d_model(make_pairs(3, seed=1), gen, disc,
                            TrainConfig(epochs=3, decay_start=2, seed=0),
                            val_pairs=make_pairs(2, seed=2))
    assert result.best_epoch is not None
    vals = [r["val_psnr"] for r in result.history]
    assert result.best_val_psnr == max(vals)
    assert result.best_epoch == int(np.argmax(vals))


def test_frozen_model_rejected():
    gen = freeze(build_generator(TINY_GEN))
    disc = build_discriminator(TINY_DISC)
    with pytest.raises(FrozenModelError):
        train_2d_model(make_pairs(1), gen, disc, TrainConfig(epochs=1, decay_start=1))


def test_nan_target_aborts():
    gen = build_generator(TINY_GEN, seed=1)
    disc = build_discriminator(TINY_DISC, seed=2)
    x = np.ones((1, 24, 24), dtype=np.float32)
    y = np.full((1, 24, 24), np.nan, dtype=np.float32)
    with pytest.raises(TrainingDiverged):
        train_2d_model([(x, y)], gen, disc, TrainConfig(epochs=1, decay_start=1))


def test_compose_taps_prior_channel():
    # with an all-zero generator and a residual compose, the fake image fed
    # to the losses is exactly the prior channel, so a target equal to that
    # channel yields a recorded pixel loss of exactly zero
    gen = build_generator(GeneratorConfig(in_channels=2, filters=(2, 3, 4), n_res_blocks=0))
    for p in gen.parameters():
        torch.nn.init.zeros_(p)
    disc = build_discriminator(DiscriminatorConfig(in_channels=3, filters=(2, 3, 4, 5)))
    rng = np.random.default_rng(0)
    prior = rng.uniform(0, 1, size=(1, 24, 24)).astype(np.float32)
    x = np.concatenate([rng.uniform(size=(1, 24, 24)).astype(np.float32), prior])
    compose = lambda xs, g: xs[:, -1:] + g
    result = train_2d_model([(x, prior)], gen, disc,
                            TrainConfig(epochs=1, decay_start=1, seed=0), compose=compose)
    assert result.history[0]["L_pix"] == 0.0
    # without the compose hook the same setup cannot have zero pixel loss
    gen2 = build_generator(GeneratorConfig(in_channels=2, filters=(2, 3, 4), n_res_blocks=0))
    for p in gen2.parameters():
        torch.nn.init.zeros_(p)
    disc2 = build_discriminator(DiscriminatorConfig(in_channels=3, filters=(2, 3, 4, 5)))
    plain = train_2d_model([(x, prior)], gen2, disc2,
                           TrainConfig(epochs=1, decay_start=1, seed=0))
    assert plain.history[0]["L_pix"] > 0.1


def test_empty_pairs_rejected():
    gen = build_generator(TINY_GEN)
    disc = build_discriminator(TINY_DISC)
    with pytest.raises(ValueError):
        train_2d_model([], gen, disc, TrainConfig(epochs=1, decay_start=1))
