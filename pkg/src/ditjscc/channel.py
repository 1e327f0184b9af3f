"""Point-to-point wireless channel: power normalization, AWGN / Rayleigh
transfer, per-symbol MMSE equalization and bandwidth-ratio accounting.

Symbols are complex torch tensors whose last dimension indexes the ``k``
channel uses; any leading dimensions are treated as a batch. Signal power is
fixed at 1 by :func:`normalize_power`, so the noise power is
``10 ** (-snr_db / 10)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

__all__ = [
    "ChannelConfig",
    "normalize_power",
    "to_real",
    "transmit",
    "equalize",
    "cbr",
    "pass_through",
]

CHANNEL_MODELS = ("awgn", "rayleigh")


@dataclass(frozen=True)
class ChannelConfig:
    model: str = "awgn"
    snr_db: float = 0.0
    seed: int = 0
    equalize: bool = True

    def __post_init__(self):
        if self.model not in CHANNEL_MODELS:
            raise ValueError(f"unknown channel model {self.model!r}, expected one of {CHANNEL_MODELS}")

    @property
    def noise_power(self) -> float:
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return 0.0
        return 10.0 ** (-self.snr_db / 10.0)


def normalize_power(raw: torch.Tensor) -> torch.Tensor:
    """Pack consecutive real pairs into complex symbols with unit mean power.

    ``raw`` has shape ``(..., 2k)``; each row along the leading dimensions is
    normalized independently. Returns a complex tensor of shape ``(..., k)``.
    """
    n = raw.shape[-1]
    if n == 0 or n % 2:
        raise ValueError(f"expected a positive even number of real values, got {n}")
    if not torch.is_floating_point(raw):
        raw = raw.to(torch.get_default_dtype())
    sym = torch.view_as_complex(raw.reshape(*raw.shape[:-1], n // 2, 2).contiguous())
    power = sym.abs().square().mean(dim=-1, keepdim=True)
    if bool((power == 0).any()):
        raise ValueError("cannot normalize an all-zero signal")
    return sym / power.sqrt()


def to_real(sym: torch.Tensor) -> torch.Tensor:
    """Inverse of the packing in :func:`normalize_power` (without rescaling)."""
    return torch.view_as_real(sym).reshape(*sym.shape[:-1], 2 * sym.shape[-1])


def _complex_normal(shape, variance: float, like: torch.Tensor, generator) -> torch.Tensor:
    real_dtype = like.real.dtype
    std = math.sqrt(variance / 2.0)
    re = torch.randn(shape, generator=generator, dtype=real_dtype, device=like.device)
    im = torch.randn(shape, generator=generator, dtype=real_dtype, device=like.device)
    return torch.complex(re * std, im * std)


def transmit(s: torch.Tensor, cfg: ChannelConfig, generator: torch.Generator | None = None):
    """Return ``(s_hat, h)`` with ``s_hat = h * s + n``.

    Gains are drawn before noise so the two streams stay aligned for a given
    generator state. With infinite SNR no noise is added at all.
    """
    if cfg.model == "awgn":
        h = torch.ones_like(s)
    else:
        h = _complex_normal(s.shape, 1.0, s, generator)
    s_hat = h * s
    if cfg.noise_power > 0:
        s_hat = s_hat + _complex_normal(s.shape, cfg.noise_power, s, generator)
    return s_hat, h


def equalize(s_hat: torch.Tensor, h: torch.Tensor, noise_power: float) -> torch.Tensor:
    """Per-symbol MMSE equalization under perfect channel knowledge."""
    denom = h.abs().square() + noise_power
    if bool((denom == 0).any()):
        raise ValueError("zero channel gain with zero noise power cannot be equalized")
    return s_hat * h.conj() / denom


def pass_through(raw: torch.Tensor, cfg: ChannelConfig, generator: torch.Generator | None = None) -> torch.Tensor:
    """Real encoder output -> received real vector of the same length.

    Normalizes, transmits, equalizes on Rayleigh (unless ``cfg.equalize`` is
    off) and unpacks back to interleaved real/imaginary parts. An empty input
    (a silent branch) is returned unchanged.
    """
    if raw.shape[-1] == 0:
        return raw
    s = normalize_power(raw)
    s_hat, h = transmit(s, cfg, generator)
    if cfg.model == "rayleigh" and cfg.equalize:
        s_hat = equalize(s_hat, h, cfg.noise_power)
    return to_real(s_hat)


def cbr(k: int, H: int, W: int) -> float:
    """Channel bandwidth ratio: complex channel uses per real source dimension."""
    if H <= 0 or W <= 0:
        raise ValueError("image dimensions must be positive")
    if k < 0:
        raise ValueError("symbol count must be non-negative")
    return k / (3 * H * W)
