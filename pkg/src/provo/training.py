"""Adversarial training loop for one cross-sectional model.

One call of train_2d_model fits a single generator / discriminator pair on
a list of (input, target) slice pairs. Batch size is fixed at 1; every
sample triggers a discriminator update followed by a generator update.
Losses are least-squares adversarial terms plus a weighted L1 pixel term.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from provo.nets import FrozenModelError, is_frozen


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns NaN or infinite."""


@dataclass(frozen=True)
class LossWeights:
    lambda_pix: float = 100.0

    def __post_init__(self):
        if self.lambda_pix < 0:
            raise ValueError(f"lambda_pix must be >= 0, got {self.lambda_pix}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr_base: float = 2e-4
    decay_start: int = 50
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 1 <= self.decay_start <= self.epochs:
            raise ValueError(
                f"decay_start must lie in [1, epochs], got {self.decay_start} with epochs {self.epochs}"
            )
        if self.lr_base <= 0:
            raise ValueError(f"lr_base must be positive, got {self.lr_base}")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant lr_base through decay_start epochs, then linear decay.

    The decayed value at epoch e is lr_base * (epochs - e) / (epochs -
    decay_start), reaching lr_base / (epochs - decay_start) on the final
    epoch. Epochs count from 0.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.decay_start:
        return cfg.lr_base
    return cfg.lr_base * (cfg.epochs - epoch) / (cfg.epochs - cfg.decay_start)


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return torch.mean((d_real - 1.0) ** 2) + torch.mean(d_fake**2)


def generator_adv_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return torch.mean((d_fake - 1.0) ** 2)


def pixel_loss(fake: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    return torch.mean(torch.abs(fake - real))


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_psnr: float | None = None


def _val_psnr(gen, val_pairs, compose, device) -> float:
    """PSNR over the whole validation set pooled into one MSE / one peak."""
    se = 0.0
    n = 0
    peak = 0.0
    gen.eval()
    with torch.no_grad():
        for x_np, y_np in val_pairs:
            x = torch.from_numpy(np.ascontiguousarray(x_np))[None].to(device)
            fake = compose(x, gen(x))
            err = fake[0].cpu().numpy().astype(np.float64) - y_np.astype(np.float64)
            se += float(np.sum(err**2))
            n += err.size
            peak = max(peak, float(y_np.max()))
    gen.train()
    if n == 0:
        raise ValueError("empty validation set")
    mse = se / n
    if mse == 0.0:
        return math.inf
    if peak <= 0.0:
        peak = 1.0
    return 10.0 * math.log10(peak * peak / mse)


def train_2d_model(pairs, gen, disc, cfg: TrainConfig, weights: LossWeights = LossWeights(),
                   compose=None, val_pairs=None, device="cpu",
                   history_path=None) -> TrainResult:
    """Fit one generator / discriminator pair in place.

    pairs: list of (input, target) float32 arrays shaped [C_in, h, w] and
    [1, h, w]. compose(x, g) maps the raw generator output to the fake
    image entering both losses (default: the output itself); residual
    stages pass an addition with the prior channel here. The discriminator
    always sees the input concatenated with real or fake target.

    When val_pairs is given, validation PSNR is logged each epoch and the
    generator is left at its best-validation epoch on return. History is a
    list of per-epoch dicts, mirrored as NDJSON when history_path is set.
    """
    if is_frozen(gen) or is_frozen(disc):
        raise FrozenModelError("cannot train a frozen model")
    if not pairs:
        raise ValueError("no training pairs")
    if compose is None:
        compose = lambda x, g: g

    gen.to(device).train()
    disc.to(device).train()
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_base, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_base, betas=(cfg.beta1, cfg.beta2))
    rng = np.random.default_rng(cfg.seed)

    result = TrainResult()
    best_state = None
    hist_file = open(history_path, "w") if history_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            for group in opt_g.param_groups:
                group["lr"] = lr
            for group in opt_d.param_groups:
                group["lr"] = lr

            sums = {"L_D": 0.0, "L_G_adv": 0.0, "L_pix": 0.0}
            order = rng.permutation(len(pairs))
            for idx in order:
                x_np, y_np = pairs[idx]
                x = torch.from_numpy(np.ascontiguousarray(x_np))[None].to(device)
                y = torch.from_numpy(np.ascontiguousarray(y_np))[None].to(device)

                with torch.no_grad():
                    fake = compose(x, gen(x))
                d_real = disc(torch.cat([x, y], dim=1))
                d_fake = disc(torch.cat([x, fake], dim=1))
                loss_d = discriminator_loss(d_real, d_fake)
                opt_d.zero_grad()
                loss_d.backward()
                opt_d.step()

                fake = compose(x, gen(x))
                d_fake = disc(torch.cat([x, fake], dim=1))
                loss_g_adv = generator_adv_loss(d_fake)
                loss_pix = pixel_loss(fake, y)
                loss_g = loss_g_adv + weights.lambda_pix * loss_pix
                opt_g.zero_grad()
                loss_g.backward()
                opt_g.step()

                vals = {"L_D": loss_d.item(), "L_G_adv": loss_g_adv.item(), "L_pix": loss_pix.item()}
                for k, v in vals.items():
                    if not math.isfinite(v):
                        raise TrainingDiverged(f"{k} became {v} at epoch {epoch}")
                    sums[k] += v

            record = {k: s / len(pairs) for k, s in sums.items()}
            record["epoch"] = epoch
            record["lr"] = lr
            if val_pairs is not None:
                vp = _val_psnr(gen, val_pairs, compose, device)
                record["val_psnr"] = vp
                if result.best_val_psnr is None or vp > result.best_val_psnr:
                    result.best_val_psnr = vp
                    result.best_epoch = epoch
                    best_state = {k: v.detach().cpu().clone() for k, v in gen.state_dict().items()}
            result.history.append(record)
            if hist_file:
                hist_file.write(json.dumps(record) + "\n")
                hist_file.flush()
    finally:
        if hist_file:
            hist_file.close()

    if best_state is not None:
        gen.load_state_dict(best_state)
    gen.eval()
    disc.eval()
    return result
