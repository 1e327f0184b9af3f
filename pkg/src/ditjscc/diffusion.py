"""DDPM mathematics: schedule, forward noising, posterior mean, ancestral
reverse step, classifier-free guidance and the noise-prediction loss.

Timesteps are 1-based (``t = 1..T``); ``t = 0`` is the clean sample. A
denoiser is any callable ``denoiser(z_t, t, c_s, c_d) -> eps_hat`` where ``t``
is a ``(B,)`` long tensor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "NoiseSchedule",
    "GuidanceConfig",
    "make_schedule",
    "toy_schedule",
    "forward_sample",
    "posterior_mu",
    "reverse_step",
    "cfg_combine",
    "clip_noise_prediction",
    "diffusion_loss",
    "sample",
]

VARIANCES = ("beta", "beta_tilde")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def sigma2(self, t: int, variance: str = "beta") -> float:
        """Reverse-step variance at timestep ``t``."""
        if variance == "beta":
            return float(self.betas[t - 1])
        if variance == "beta_tilde":
            prev = self.alpha_bars[t - 2] if t > 1 else 1.0
            return float((1.0 - prev) / (1.0 - self.alpha_bars[t - 1]) * self.betas[t - 1])
        raise ValueError(f"variance must be one of {VARIANCES}")


def make_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0.0 < beta_1 <= beta_T < 1.0:
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got ({beta_1}, {beta_T})")
    betas = np.linspace(beta_1, beta_T, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def toy_schedule(T: int = 200) -> NoiseSchedule:
    """Linear schedule with the 1000-step endpoints rescaled by ``1000 / T``.

    Keeps the total noise budget (and so ``alpha_bar_T`` near zero) when the
    chain is shortened.
    """
    scale = 1000.0 / T
    return make_schedule(T, 1e-4 * scale, min(0.02 * scale, 0.999))


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather ``values[t - 1]`` and shape it to broadcast against ``like``."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        idx = t.detach().cpu().long().numpy() - 1
        out = torch.as_tensor(values[idx], dtype=like.dtype, device=like.device)
        return out.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(float(values[int(t) - 1]), dtype=like.dtype, device=like.device)


def _check_t(t, sched: NoiseSchedule):
    lo, hi = (int(t.min()), int(t.max())) if isinstance(t, torch.Tensor) and t.ndim > 0 else (int(t), int(t))
    if lo < 1 or hi > sched.T:
        raise ValueError(f"timestep out of range [1, {sched.T}]")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_sample(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    _same_shape(z0, eps, "forward_sample")
    _check_t(t, sched)
    ab = _coef(sched.alpha_bars, t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def posterior_mu(z_t: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Mean of ``q(z_{t-1} | z_t, z_0)`` written in terms of the noise."""
    _same_shape(z_t, eps, "posterior_mu")
    _check_t(t, sched)
    a = _coef(sched.alphas, t, z_t)
    ab = _coef(sched.alpha_bars, t, z_t)
    return (z_t - (1.0 - a) / (1.0 - ab).sqrt() * eps) / a.sqrt()


def reverse_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    variance: str = "beta",
) -> torch.Tensor:
    """One ancestral step ``z_t -> z_{t-1}``; the final step adds no noise."""
    mu = posterior_mu(z_t, eps_hat, t, sched)
    if t == 1:
        return mu
    sigma = sched.sigma2(t, variance) ** 0.5
    noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype, device=z_t.device)
    return mu + sigma * noise


def clip_noise_prediction(z_t: torch.Tensor, eps: torch.Tensor, t: int, sched: NoiseSchedule,
                          bound: float) -> torch.Tensor:
    """Noise consistent with ``z_t`` and the clamped clean-image estimate."""
    ab = float(sched.alpha_bars[t - 1])
    x0 = ((z_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)).clamp(-bound, bound)
    return (z_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, phi: float) -> torch.Tensor:
    _same_shape(eps_cond, eps_uncond, "cfg_combine")
    if phi == 1.0:
        return eps_cond.clone()
    return eps_uncond + phi * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class GuidanceConfig:
    phi: float = 2.0
    p_u: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.p_u <= 1.0:
            raise ValueError("p_u must lie in [0, 1]")

    @staticmethod
    def null_condition(c: torch.Tensor) -> torch.Tensor:
        return torch.zeros_like(c)


def diffusion_loss(denoiser, z0, c_s, c_d, t, eps, sched: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between the injected and the predicted noise."""
    if not isinstance(t, torch.Tensor):
        t = torch.full((z0.shape[0],), int(t), dtype=torch.long, device=z0.device)
    z_t = forward_sample(z0, t, eps, sched)
    return (eps - denoiser(z_t, t, c_s, c_d)).square().mean()


@torch.no_grad()
def sample(
    denoiser,
    c_s,
    c_d,
    guidance: GuidanceConfig,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    shape=None,
    variance: str = "beta",
    dtype=None,
    clip_x0: float | None = None,
) -> torch.Tensor:
    """Guided ancestral sampling from ``z_T ~ N(0, I)`` down to ``z_0``.

    At ``phi == 1`` the unconditional branch is skipped. With ``clip_x0``
    set, the clean image implied by each noise prediction is clamped to
    ``[-clip_x0, clip_x0]`` and the noise re-derived from it before the step;
    short chains with an imperfect denoiser otherwise drift far outside the
    data range.
    """
    dtype = dtype or torch.get_default_dtype()
    z = torch.randn(shape, generator=generator, dtype=dtype)
    null_s = guidance.null_condition(c_s)
    null_d = guidance.null_condition(c_d)
    for t in range(sched.T, 0, -1):
        tt = torch.full((shape[0],), t, dtype=torch.long)
        eps = denoiser(z, tt, c_s, c_d)
        if guidance.phi != 1.0:
            eps = cfg_combine(eps, denoiser(z, tt, null_s, null_d), guidance.phi)
        if clip_x0 is not None:
            eps = clip_noise_prediction(z, eps, t, sched, clip_x0)
        z = reverse_step(z, eps, t, sched, generator, variance)
    return z
