"""Dual-branch transmitter.

The semantic branch runs a frozen feature extractor (a small pretrained
classifier standing in for a vision foundation model), then a latent-domain
encoder that only mixes channels. The detail branch is a pixel-domain
encoder with two stride-2 stages. Both end in a bandwidth-control head that
keeps the leading ``2k / (g*g)`` channels of a fixed-width map, so a lower
rate is always a prefix of a higher one.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .channel import to_real

__all__ = [
    "BandwidthCandidates",
    "FrozenExtractor",
    "DualBranchEncoder",
    "receiver_unpack",
    "channel_width",
]


def _ladder(step, lo, hi):
    return tuple(step * i for i in range(lo, hi + 1))


@dataclass(frozen=True)
class BandwidthCandidates:
    ks_set: tuple = field(default_factory=lambda: _ladder(64, 1, 8))
    kd_set: tuple = field(default_factory=lambda: _ladder(64, 0, 8))

    def __post_init__(self):
        object.__setattr__(self, "ks_set", tuple(sorted(int(k) for k in self.ks_set)))
        object.__setattr__(self, "kd_set", tuple(sorted(int(k) for k in self.kd_set)))
        if 0 in self.ks_set:
            raise ValueError("k_s = 0 is not an admissible semantic rate")
        if 0 not in self.kd_set:
            raise ValueError("the detail candidate set must contain 0")

    def check_ks(self, k_s: int) -> int:
        if k_s not in self.ks_set:
            raise ValueError(f"k_s={k_s} is not admissible; choose from {list(self.ks_set)}")
        return k_s

    def check_kd(self, k_d: int) -> int:
        if k_d not in self.kd_set:
            raise ValueError(f"k_d={k_d} is not admissible; choose from {list(self.kd_set)}")
        return k_d


def channel_width(k: int, grid: int) -> int:
    """Real channels per grid position carrying ``k`` complex symbols."""
    area = grid * grid
    if (2 * k) % area:
        raise ValueError(f"2k = {2 * k} is not divisible by the grid area {area}")
    return 2 * k // area


class FrozenExtractor(nn.Module):
    """Four-conv classifier; its last conv map is the semantic representation.

    Input is ``(B, 3, 32, 32)`` in [0, 1]; features are ``(B, 64, 8, 8)``.
    """

    def __init__(self, num_classes: int = 4, img_size: int = 32, width: int = 64):
        super().__init__()
        self.img_size = img_size
        self.width = width
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1),
        )
        self.classifier = nn.Linear(width, num_classes, bias=False)
        self.scale = 10.0
        self.frozen = False

    def _check(self, x):
        if x.ndim != 4 or x.shape[1:] != (3, self.img_size, self.img_size):
            raise ValueError(f"expected (B, 3, {self.img_size}, {self.img_size}) images, got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.features(x)

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x).mean(dim=(2, 3))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        # cosine-softmax head: classes are separated by angle in pooled space,
        # which is what the cosine-based evaluation metrics measure
        f = F.normalize(self.pooled(x), dim=1)
        return self.scale * f @ F.normalize(self.classifier.weight, dim=1).T

    def freeze(self) -> "FrozenExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self.eval()

    def train(self, mode: bool = True):
        # stays in eval mode once frozen
        return super().train(mode and not self.frozen)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def _bc_head(full: torch.Tensor, k: int) -> torch.Tensor:
    """Keep the leading channels and flatten channel-major to ``(B, 2k)``."""
    B, C, g, _ = full.shape
    if k == 0:
        return full.new_zeros(B, 0)
    w = channel_width(k, g)
    if w > C:
        raise ValueError(f"k={k} needs {w} channels per position, only {C} available")
    return full[:, :w].reshape(B, -1)


class DualBranchEncoder(nn.Module):
    def __init__(self, sem_channels: int = 64, out_channels: int = 16, hidden: int = 128,
                 candidates: BandwidthCandidates | None = None):
        super().__init__()
        self.out_channels = out_channels
        self.candidates = candidates or BandwidthCandidates()
        # latent-domain: channel mixing only, keeps the 8x8 grid
        self.f_ld = nn.Sequential(
            nn.Conv2d(sem_channels, hidden, 1),
            nn.GELU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, out_channels, 1),
        )
        # pixel-domain: two stride-2 stages, then channel compression
        self.f_pd = nn.Sequential(
            nn.Conv2d(3, hidden // 2, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden // 2, hidden, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, out_channels, 1),
        )

    def encode_semantic(self, y: torch.Tensor, k_s: int) -> torch.Tensor:
        self.candidates.check_ks(k_s)
        return _bc_head(self.f_ld(y), k_s)

    def encode_detail(self, x: torch.Tensor, k_d: int) -> torch.Tensor:
        self.candidates.check_kd(k_d)
        if k_d == 0:
            return x.new_zeros(x.shape[0], 0)
        return _bc_head(self.f_pd(x), k_d)


def receiver_unpack(c: torch.Tensor, k: int, full_width: int, grid: int) -> torch.Tensor:
    """Received symbols (complex ``(B, k)`` or real ``(B, 2k)``) -> ``(B, full_width, g, g)``.

    Channels the transmitter dropped are zero-filled, so a silent branch
    (``k = 0``) comes out as the all-zero null condition.
    """
    real = to_real(c) if torch.is_complex(c) else c
    if real.shape[-1] != 2 * k:
        raise ValueError(f"received {real.shape[-1]} real values, expected 2k = {2 * k}")
    B = real.shape[0]
    if k == 0:
        return real.new_zeros(B, full_width, grid, grid)
    w = channel_width(k, grid)
    if w > full_width:
        raise ValueError(f"k={k} exceeds the full condition width {full_width}")
    pad = real.new_zeros(B, full_width - w, grid, grid)
    return torch.cat([real.reshape(B, w, grid, grid), pad], dim=1)
