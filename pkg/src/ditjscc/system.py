"""Transmitter, channel and generative receiver wired together."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .cdit import CDiT, CDiTConfig
from .channel import ChannelConfig, pass_through
from .diffusion import GuidanceConfig, NoiseSchedule, make_schedule, sample, toy_schedule
from .encoder import BandwidthCandidates, DualBranchEncoder, FrozenExtractor, receiver_unpack

__all__ = ["SystemConfig", "DiTJSCC", "build_system", "to_model_range", "to_image_range"]


@dataclass(frozen=True)
class SystemConfig:
    cdit: CDiTConfig = field(default_factory=CDiTConfig)
    candidates: BandwidthCandidates = field(default_factory=BandwidthCandidates)
    num_classes: int = 4
    sem_width: int = 64
    enc_hidden: int = 128
    T: int = 200
    variance: str = "beta"
    # clamp of the predicted clean image during sampling (model range is [-1, 1])
    clip_x0: float | None = 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["candidates"] = {"ks_set": list(self.candidates.ks_set), "kd_set": list(self.candidates.kd_set)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        d = dict(d)
        d["cdit"] = CDiTConfig.from_dict(d["cdit"])
        d["candidates"] = BandwidthCandidates(**d["candidates"])
        return cls(**d)

    def schedule(self) -> NoiseSchedule:
        return make_schedule() if self.T == 1000 else toy_schedule(self.T)


def to_model_range(x: torch.Tensor) -> torch.Tensor:
    return 2.0 * x - 1.0


def to_image_range(z: torch.Tensor) -> torch.Tensor:
    return ((z + 1.0) / 2.0).clamp(0.0, 1.0)


class DiTJSCC(nn.Module):
    def __init__(self, cfg: SystemConfig = SystemConfig()):
        super().__init__()
        self.cfg = cfg
        self.extractor = FrozenExtractor(cfg.num_classes, cfg.cdit.img_size, cfg.sem_width)
        self.encoder = DualBranchEncoder(cfg.sem_width, cfg.cdit.cond_channels, cfg.enc_hidden, cfg.candidates)
        self.denoiser = CDiT(cfg.cdit)
        self.schedule = cfg.schedule()

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("extractor.")]

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        den = self.denoiser
        return {
            "semantic_encoder": list(self.encoder.f_ld.parameters()),
            "detail_encoder": list(self.encoder.f_pd.parameters()),
            "adapters": list(den.adapter_s.parameters()) + list(den.adapter_d.parameters()),
            "cdit_blocks": list(den.blocks.parameters()),
            "output_head": list(den.norm_out.parameters()) + list(den.head.parameters()),
            "extractor": list(self.extractor.parameters()),
        }

    def conditions(self, x: torch.Tensor, k_s: int, k_d: int, channel: ChannelConfig,
                   generator: torch.Generator | None = None):
        """Encode, transmit and unpack both branches.

        ``k_s = 0`` switches the semantic branch off entirely (an evaluation
        surrogate; training never uses it).
        """
        grid, width = self.cfg.cdit.grid, self.cfg.cdit.cond_channels
        if k_s == 0:
            c_s = x.new_zeros(x.shape[0], width, grid, grid)
        else:
            with torch.no_grad():
                y = self.extractor(x)
            raw = self.encoder.encode_semantic(y, k_s)
            c_s = receiver_unpack(pass_through(raw, channel, generator), k_s, width, grid)
        raw = self.encoder.encode_detail(x, k_d)
        c_d = receiver_unpack(pass_through(raw, channel, generator), k_d, width, grid)
        return c_s, c_d

    @torch.no_grad()
    def reconstruct(self, x: torch.Tensor, k_s: int, k_d: int, channel: ChannelConfig,
                    guidance: GuidanceConfig, generator: torch.Generator | None = None) -> torch.Tensor:
        """Transmit ``x`` (in [0, 1]) and decode by guided sampling; returns images in [0, 1]."""
        c_s, c_d = self.conditions(x, k_s, k_d, channel, generator)
        z0 = sample(self.denoiser, c_s, c_d, guidance, self.schedule, generator, x.shape,
                    variance=self.cfg.variance, dtype=x.dtype, clip_x0=self.cfg.clip_x0)
        return to_image_range(z0)


def build_system(cfg: SystemConfig = SystemConfig(), seed: int = 0) -> DiTJSCC:
    torch.manual_seed(seed)
    return DiTJSCC(cfg)
