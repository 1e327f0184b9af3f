"""Coarse-to-fine conditional diffusion transformer (the noise predictor).

Layout of the ``2N + 1`` blocks, numbered from 1:

* ``1 .. N_s``            fuse the semantic condition
* ``N_s+1 .. N_s+N_d``    fuse the detail condition
* ``.. N+1``              plain blocks (the last one is the middle block)
* ``N+2 .. 2N+1``         take ``CL(o_{i-1}, o_{2N+2-i})`` (concat + linear),
                          a long skip from the mirrored shallow block

Images are NCHW. Conditions are ``(B, C_cond, g, g)`` maps on the same grid
as the ``g x g`` patch tokens.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "BlockLayout",
    "CDiTConfig",
    "CDiT",
    "patchify",
    "unpatchify",
    "sinusoidal_features",
]


@dataclass(frozen=True)
class BlockLayout:
    N: int = 4
    N_s: int = 2
    N_d: int = 2

    def __post_init__(self):
        if self.N_s < 1:
            raise ValueError("at least one semantic-conditioned block is required")
        if self.N_d < 0 or self.N_s + self.N_d > self.N + 1:
            raise ValueError(f"N_s + N_d must not exceed N + 1 = {self.N + 1}")

    @property
    def N_r(self) -> int:
        return self.N + 1 - self.N_s - self.N_d

    @property
    def depth(self) -> int:
        return 2 * self.N + 1

    @classmethod
    def from_total(cls, total: int, N_s: int, N_d: int) -> "BlockLayout":
        """Build from a total block count (must be odd)."""
        if total % 2 == 0:
            raise ValueError("total block count must be odd (2N + 1)")
        return cls((total - 1) // 2, N_s, N_d)

    def kind(self, i: int) -> str:
        """'s', 'd', 'plain' or 'skip' for 1-based block index ``i``."""
        if i <= self.N_s:
            return "s"
        if i <= self.N_s + self.N_d:
            return "d"
        if i <= self.N + 1:
            return "plain"
        return "skip"


@dataclass(frozen=True)
class CDiTConfig:
    img_size: int = 32
    in_channels: int = 3
    patch: int = 4
    dim: int = 128
    cond_dim: int = 64
    cond_channels: int = 16
    heads: int = 4
    mlp_ratio: float = 4.0
    freq_dim: int = 256
    layout: BlockLayout = field(default_factory=BlockLayout)

    @property
    def grid(self) -> int:
        return self.img_size // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid**2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CDiTConfig":
        d = dict(d)
        d["layout"] = BlockLayout(**d["layout"])
        return cls(**d)


def patchify(z: torch.Tensor, p: int) -> torch.Tensor:
    """``(B, C, H, W) -> (B, L, p*p*C)`` with patches in row-major order."""
    B, C, H, W = z.shape
    if H % p or W % p:
        raise ValueError(f"patch size {p} does not divide {H}x{W}")
    x = z.reshape(B, C, H // p, p, W // p, p)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(B, (H // p) * (W // p), p * p * C)


def unpatchify(x: torch.Tensor, p: int, C: int, H: int, W: int) -> torch.Tensor:
    B = x.shape[0]
    x = x.reshape(B, H // p, W // p, p, p, C)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(B, C, H, W)


def sinusoidal_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _init_linear(m: nn.Linear):
    nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
    if m.bias is not None:
        nn.init.zeros_(m.bias)


class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_features(t, self.freq_dim).to(dtype))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, L, D = x.shape
        q, k, v = self.qkv(x).reshape(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class DiTBlock(nn.Module):
    """Pre-norm transformer block: self-attention and MLP, both residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ConditionAdapter(nn.Module):
    """Maps a ``(B, C, g, g)`` condition to an ``(L+1) x D'`` sequence.

    Grid cells become tokens 1..L in row-major order; token 0 (the timestep
    slot) is a learned vector.
    """

    def __init__(self, in_channels: int, cond_dim: int, grid: int):
        super().__init__()
        self.grid = grid
        self.in_channels = in_channels
        self.proj = nn.Sequential(nn.Linear(in_channels, cond_dim), nn.GELU(approximate="tanh"), nn.Linear(cond_dim, cond_dim))
        self.time_slot = nn.Parameter(torch.zeros(cond_dim))

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        if c.ndim != 4 or c.shape[1] != self.in_channels or c.shape[2:] != (self.grid, self.grid):
            raise ValueError(
                f"condition must be (B, {self.in_channels}, {self.grid}, {self.grid}), got {tuple(c.shape)}"
            )
        seq = self.proj(c.flatten(2).transpose(1, 2))
        slot = self.time_slot.expand(c.shape[0], 1, -1)
        return torch.cat([slot, seq], dim=1)


class ChannelFusion(nn.Module):
    """Concatenate the condition sequence on the channel axis, project back to D.

    Initialized as ``[I | 0]`` so that a fresh network ignores conditions.
    """

    def __init__(self, dim: int, cond_dim: int):
        super().__init__()
        self.dim = dim
        self.linear = nn.Linear(dim + cond_dim, dim)
        self.reset_parameters()

    def reset_parameters(self):
        dim = self.dim
        with torch.no_grad():
            self.linear.weight.zero_()
            self.linear.weight[:, :dim].copy_(torch.eye(dim))
            self.linear.bias.zero_()

    def forward(self, o: torch.Tensor, o_cond: torch.Tensor) -> torch.Tensor:
        if o_cond.shape[:2] != o.shape[:2]:
            raise ValueError(f"condition sequence {tuple(o_cond.shape)} does not align with tokens {tuple(o.shape)}")
        return self.linear(torch.cat([o, o_cond], dim=-1))


def fuse_condition(o: torch.Tensor, c: torch.Tensor, adapter: ConditionAdapter, fusion: ChannelFusion) -> torch.Tensor:
    return fusion(o, adapter(c))


class CDiTBlock(nn.Module):
    def __init__(self, cfg: CDiTConfig, kind: str):
        super().__init__()
        self.kind = kind
        if kind in ("s", "d"):
            self.fusion = ChannelFusion(cfg.dim, cfg.cond_dim)
        elif kind == "skip":
            self.skip_linear = nn.Linear(2 * cfg.dim, cfg.dim)
        self.block = DiTBlock(cfg.dim, cfg.heads, cfg.mlp_ratio)

    def forward(self, o, cond_seq=None, skip=None):
        if self.kind in ("s", "d"):
            o = self.fusion(o, cond_seq)
        elif self.kind == "skip":
            o = self.skip_linear(torch.cat([o, skip], dim=-1))
        return self.block(o)


class CDiT(nn.Module):
    def __init__(self, cfg: CDiTConfig = CDiTConfig()):
        super().__init__()
        if cfg.img_size % cfg.patch:
            raise ValueError("patch size must divide the image size")
        self.cfg = cfg
        lay = cfg.layout
        patch_dim = cfg.patch**2 * cfg.in_channels
        self.patch_embed = nn.Linear(patch_dim, cfg.dim)
        self.t_embed = TimestepEmbedder(cfg.dim, cfg.freq_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, cfg.dim))
        self.adapter_s = ConditionAdapter(cfg.cond_channels, cfg.cond_dim, cfg.grid)
        self.adapter_d = ConditionAdapter(cfg.cond_channels, cfg.cond_dim, cfg.grid)
        self.blocks = nn.ModuleList(CDiTBlock(cfg, lay.kind(i)) for i in range(1, lay.depth + 1))
        self.norm_out = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, patch_dim)
        self._init_weights()
        self.trace: list | None = None

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _init_linear(m)
        for m in self.modules():
            if isinstance(m, ChannelFusion):
                m.reset_parameters()
            if isinstance(m, ConditionAdapter):
                nn.init.trunc_normal_(m.time_slot, std=0.02, a=-0.04, b=0.04)
        with torch.no_grad():
            pos = torch.arange(self.cfg.num_patches + 1)
            self.pos_embed.copy_(sinusoidal_features(pos, self.cfg.dim).to(self.pos_embed.dtype)[None])

    # The forward pass is split in three pieces so tests can drive the
    # backbone on permuted token sequences.
    def embed(self, z_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(patchify(z_t, self.cfg.patch))
        tok = self.t_embed(t)[:, None]
        return torch.cat([tok, x], dim=1) + self.pos_embed

    def backbone(self, o: torch.Tensor, seq_s: torch.Tensor, seq_d: torch.Tensor) -> torch.Tensor:
        N = self.cfg.layout.N
        outs = [o]  # outs[i] is o_i
        for i, blk in enumerate(self.blocks, start=1):
            if blk.kind == "skip":
                j = 2 * N + 2 - i
                o = blk(o, skip=outs[j])
                src = j
            else:
                o = blk(o, cond_seq={"s": seq_s, "d": seq_d}.get(blk.kind))
                src = None
            if self.trace is not None:
                self.trace.append({"block": i, "kind": blk.kind, "skip_from": src, "input": outs[-1], "output": o})
            outs.append(o)
        return o

    def project_out(self, o: torch.Tensor) -> torch.Tensor:
        c = self.cfg
        x = self.head(self.norm_out(o[:, 1:]))
        return unpatchify(x, c.patch, c.in_channels, c.img_size, c.img_size)

    def forward(self, z_t, t, c_s, c_d):
        if not isinstance(t, torch.Tensor):
            t = torch.full((z_t.shape[0],), int(t), dtype=torch.long)
        o = self.embed(z_t, t)
        o = self.backbone(o, self.adapter_s(c_s), self.adapter_d(c_d))
        return self.project_out(o)
