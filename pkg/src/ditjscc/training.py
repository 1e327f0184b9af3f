"""Joint training of both branch encoders and the denoiser through the
simulated channel, extractor pretraining, and the MSE-trained baseline."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .channel import ChannelConfig, pass_through
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import diffusion_loss
from .encoder import DualBranchEncoder, FrozenExtractor, receiver_unpack
from .system import DiTJSCC, SystemConfig, to_model_range

__all__ = [
    "TrainConfig",
    "Trainer",
    "pretrain_extractor",
    "BaselineConfig",
    "BaselineJSCC",
    "train_baseline",
    "save_system",
    "load_system",
    "TRAIN_LOG_HEADER",
]

log = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ("step", "loss", "grad_norm", "seconds")


LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 32
    lr: float = 1e-4
    p_u: float = 0.1
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    # (lo, hi) in dB draws a fresh SNR per step instead of the fixed channel SNR
    snr_range: tuple[float, float] | None = None
    seed: int = 0
    log_every: int = 50
    # "constant" or "cosine" (decay to zero at ``steps``), after a linear warm-up
    lr_schedule: str = "constant"
    warmup_steps: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_u <= 1.0:
            raise ValueError("p_u must lie in [0, 1]")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")

    def lr_factor(self, step: int) -> float:
        """Multiplier on ``lr`` for the update that follows ``step`` completed ones."""
        f = min(1.0, (step + 1) / self.warmup_steps) if self.warmup_steps else 1.0
        if self.lr_schedule == "cosine":
            f *= 0.5 * (1.0 + math.cos(math.pi * min(step, self.steps) / self.steps))
        return f


def pretrain_extractor(extractor: FrozenExtractor, images: torch.Tensor, labels: torch.Tensor,
                       steps: int = 1500, batch_size: int = 64, lr: float = 1e-3, seed: int = 0) -> FrozenExtractor:
    """Fit the surrogate classifier on toy labels, then freeze it."""
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(extractor.parameters(), lr=lr)
    extractor.train()
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(len(images), size=batch_size))
        loss = F.cross_entropy(extractor.logits(images[idx]), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return extractor.freeze()


class Trainer:
    """Owns the optimizer and all random streams of one training run."""

    def __init__(self, system: DiTJSCC, images: torch.Tensor, cfg: TrainConfig):
        self.system = system
        self.images = images
        self.cfg = cfg
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = torch.optim.Adam(system.trainable_parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
        self.sched = torch.optim.lr_scheduler.LambdaLR(self.opt, cfg.lr_factor)
        self.step = 0
        self.dropped = 0
        self.seen = 0
        self.last_grad_norm = float("nan")

    def next_batch(self) -> torch.Tensor:
        idx = self.rng.integers(len(self.images), size=self.cfg.batch_size)
        return self.images[torch.from_numpy(idx)]

    def sample_rates(self) -> tuple[int, int]:
        cands = self.system.cfg.candidates
        return int(self.rng.choice(cands.ks_set)), int(self.rng.choice(cands.kd_set))

    def sample_channel(self) -> ChannelConfig:
        c = self.cfg.channel
        if self.cfg.snr_range is None:
            return c
        lo, hi = self.cfg.snr_range
        return ChannelConfig(c.model, float(self.rng.uniform(lo, hi)), c.seed, c.equalize)

    def drop_mask(self, n: int) -> torch.Tensor:
        return torch.rand(n, generator=self.gen) < self.cfg.p_u

    def compute_loss(self, x: torch.Tensor, k_s: int, k_d: int, channel: ChannelConfig) -> torch.Tensor:
        sys_ = self.system
        B = x.shape[0]
        c_s, c_d = sys_.conditions(x, k_s, k_d, channel, self.gen)
        drop = self.drop_mask(B)
        self.dropped += int(drop.sum())
        self.seen += B
        keep = (~drop).to(x.dtype).view(B, 1, 1, 1)
        c_s, c_d = c_s * keep, c_d * keep
        t = torch.randint(1, sys_.schedule.T + 1, (B,), generator=self.gen)
        z0 = to_model_range(x)
        eps = torch.randn(z0.shape, generator=self.gen, dtype=z0.dtype)
        return diffusion_loss(sys_.denoiser, z0, c_s, c_d, t, eps, sys_.schedule)

    def train_step(self, x: torch.Tensor | None = None) -> float:
        if x is None:
            x = self.next_batch()
        self.system.train()
        k_s, k_d = self.sample_rates()
        loss = self.compute_loss(x, k_s, k_d, self.sample_channel())
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss.item()} at step {self.step} (k_s={k_s}, k_d={k_d})")
        self.opt.zero_grad(set_to_none=False)
        loss.backward()
        params = self.system.trainable_parameters()
        self.last_grad_norm = float(torch.sqrt(sum(p.grad.square().sum() for p in params if p.grad is not None)))
        self.opt.step()
        self.sched.step()
        self.step += 1
        return loss.detach().item()

    def fit(self, steps: int | None = None, log_path=None, record_time: bool = True) -> list[float]:
        """Run ``steps`` updates, optionally appending rows to a CSV log.

        ``seconds`` is wall-clock time since the call started; it is written
        as 0.0 when ``record_time`` is off so that logs are reproducible.
        """
        steps = self.cfg.steps if steps is None else steps
        losses = []
        start = time.perf_counter()
        writer = fh = None
        if log_path is not None:
            fh = open(log_path, "w", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRAIN_LOG_HEADER)
        last = self.step + steps
        try:
            for _ in range(steps):
                loss = self.train_step()
                losses.append(loss)
                if writer and (self.step % self.cfg.log_every == 0 or self.step in (1, last)):
                    secs = time.perf_counter() - start if record_time else 0.0
                    writer.writerow([self.step, f"{loss:.6f}", f"{self.last_grad_norm:.6f}", f"{secs:.1f}"])
                    fh.flush()
                if self.step % 500 == 0:
                    log.info("step %d loss %.4f", self.step, float(np.mean(losses[-500:])))
        finally:
            if fh:
                fh.close()
        return losses


@dataclass
class BaselineConfig:
    k_s: int = 64
    k_d: int = 64
    steps: int = 4000
    batch_size: int = 32
    lr: float = 1e-3
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    seed: int = 0


class BaselineJSCC(nn.Module):
    """Same dual-branch transmitter, deterministic conv decoder, MSE objective."""

    def __init__(self, extractor: FrozenExtractor, sys_cfg: SystemConfig = SystemConfig()):
        super().__init__()
        self.cfg = sys_cfg
        self.extractor = extractor
        self.encoder = DualBranchEncoder(sys_cfg.sem_width, sys_cfg.cdit.cond_channels, sys_cfg.enc_hidden,
                                         sys_cfg.candidates)
        w = sys_cfg.cdit.cond_channels
        self.decoder = nn.Sequential(
            nn.Conv2d(2 * w, 128, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(128, 128, 3, padding=1),
            nn.GELU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(128, 96, 3, padding=1),
            nn.GELU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(96, 64, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(64, 3, 3, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, x, k_s: int, k_d: int, channel: ChannelConfig, generator=None):
        grid, width = self.cfg.cdit.grid, self.cfg.cdit.cond_channels
        if k_s == 0:
            c_s = x.new_zeros(x.shape[0], width, grid, grid)
        else:
            with torch.no_grad():
                y = self.extractor(x)
            c_s = receiver_unpack(pass_through(self.encoder.encode_semantic(y, k_s), channel, generator), k_s, width, grid)
        c_d = receiver_unpack(pass_through(self.encoder.encode_detail(x, k_d), channel, generator), k_d, width, grid)
        return self.decoder(torch.cat([c_s, c_d], dim=1))


def train_baseline(extractor: FrozenExtractor, images: torch.Tensor, cfg: BaselineConfig,
                   sys_cfg: SystemConfig = SystemConfig()) -> tuple[BaselineJSCC, list[float]]:
    torch.manual_seed(cfg.seed)
    model = BaselineJSCC(extractor, sys_cfg)
    params = [p for n, p in model.named_parameters() if not n.startswith("extractor.")]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for _ in range(cfg.steps):
        x = images[torch.from_numpy(rng.integers(len(images), size=cfg.batch_size))]
        loss = F.mse_loss(model(x, cfg.k_s, cfg.k_d, cfg.channel, gen), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.detach().item())
    return model.eval(), losses


def save_system(system: nn.Module, path, config: dict) -> None:
    save_checkpoint(system.state_dict(), path, config)


def load_system(path) -> tuple[DiTJSCC, dict]:
    params, config = load_checkpoint(path)
    system = DiTJSCC(SystemConfig.from_dict(config["system"]))
    system.load_state_dict(params)
    system.extractor.freeze()
    return system.eval(), config

