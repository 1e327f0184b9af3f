"""Reconstruction metrics and the evaluation sweeps.

Learned perceptual metrics are replaced by two measurements on the frozen
extractor's pooled features: cosine similarity per image pair and a
Fréchet distance between the Gaussian fits of two image sets.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .channel import ChannelConfig, cbr
from .diffusion import GuidanceConfig
from .encoder import FrozenExtractor

__all__ = [
    "psnr",
    "psnr_per_image",
    "feature_cosine",
    "frechet_distance",
    "toy_frechet",
    "class_consistency",
    "MetricReport",
    "Evaluator",
    "sweep_cbr",
    "branch_ablation",
    "ba_comparison",
    "write_csv",
    "SWEEP_HEADER",
    "BA_HEADER",
]

SWEEP_HEADER = ("cbr", "k", "k_s", "k_d", "rho_s", "rho_d", "psnr", "feat_cos", "toy_fid", "class_acc")
BA_HEADER = ("strategy", "mean_k", "mean_k_s", "mean_k_d", "psnr", "feat_cos", "toy_fid", "class_acc")


def psnr_per_image(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse = (x - x_hat).double().square().flatten(1).mean(dim=1)
    return 10.0 * torch.log10(1.0 / mse)  # mse == 0 gives +inf


def psnr(x: torch.Tensor, x_hat: torch.Tensor) -> float:
    """PSNR in dB for images in [0, 1]; identical inputs give ``math.inf``."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse = float((x - x_hat).double().square().mean())
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


@torch.no_grad()
def _features(images: torch.Tensor, extractor: FrozenExtractor, batch: int = 256) -> torch.Tensor:
    return torch.cat([extractor.pooled(images[i : i + batch]) for i in range(0, len(images), batch)]).double()


def _feature_dim(extractor: FrozenExtractor) -> int:
    return extractor.width


def feature_cosine(x: torch.Tensor, x_hat: torch.Tensor, extractor: FrozenExtractor) -> torch.Tensor:
    """Per-image cosine similarity of pooled frozen features."""
    a, b = _features(x, extractor), _features(x_hat, extractor)
    return torch.nn.functional.cosine_similarity(a, b, dim=1)


def _sqrt_psd_eigs(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    tol = 1e-8 * max(1.0, float(np.abs(w).max()))
    if w.min() < -tol:
        cond = np.abs(w).max() / max(np.abs(w).min(), np.finfo(float).tiny)
        raise np.linalg.LinAlgError(
            f"{what} is not positive semi-definite: min eigenvalue {w.min():.3e}, condition {cond:.3e}"
        )
    return np.clip(w, 0.0, None), v


def frechet_distance(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets (rows are samples)."""
    feat_a, feat_b = np.asarray(feat_a, np.float64), np.asarray(feat_b, np.float64)
    if feat_a.ndim == 1:
        feat_a, feat_b = feat_a[:, None], feat_b[:, None]
    d = feat_a.shape[1]
    if min(len(feat_a), len(feat_b)) < 2 * d:
        raise ValueError(f"need at least {2 * d} samples per set for {d}-dim features")
    mu_a, mu_b = feat_a.mean(0), feat_b.mean(0)
    cov_a = np.atleast_2d(np.cov(feat_a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(feat_b, rowvar=False))
    # Tr (A B)^1/2 = Tr (A^1/2 B A^1/2)^1/2, whose argument is symmetric PSD
    w, v = _sqrt_psd_eigs(cov_a, "covariance of set a")
    root_a = (v * np.sqrt(w)) @ v.T
    w_mid, _ = _sqrt_psd_eigs(root_a @ cov_b @ root_a, "covariance product")
    tr_sqrt = np.sqrt(w_mid).sum()
    dist = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(dist, 0.0)


def toy_frechet(set_a: torch.Tensor, set_b: torch.Tensor, extractor: FrozenExtractor) -> float:
    return frechet_distance(_features(set_a, extractor).numpy(), _features(set_b, extractor).numpy())


@torch.no_grad()
def class_consistency(x_hat: torch.Tensor, labels, extractor: FrozenExtractor) -> float:
    """Fraction of images the frozen classifier assigns to their source label."""
    pred = torch.cat([extractor.logits(x_hat[i : i + 256]).argmax(1) for i in range(0, len(x_hat), 256)])
    return float((pred == torch.as_tensor(labels)).double().mean())


@dataclass
class MetricReport:
    psnr: float
    feat_cos: float
    toy_fid: float
    class_acc: float
    per_image_psnr: np.ndarray
    per_image_cos: np.ndarray

    @classmethod
    def measure(cls, x, x_hat, labels, extractor) -> "MetricReport":
        p = psnr_per_image(x, x_hat).numpy()
        c = feature_cosine(x, x_hat, extractor).numpy()
        finite = p[np.isfinite(p)]
        return cls(
            psnr=float(finite.mean()) if len(finite) else math.inf,
            feat_cos=float(c.mean()),
            toy_fid=toy_frechet(x, x_hat, extractor) if len(x) >= 2 * _feature_dim(extractor) else math.nan,
            class_acc=class_consistency(x_hat, labels, extractor),
            per_image_psnr=p,
            per_image_cos=c,
        )

    def row(self) -> list[str]:
        return [_fmt(self.psnr), _fmt(self.feat_cos), _fmt(self.toy_fid), _fmt(self.class_acc)]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return "inf" if math.isinf(v) else f"{v:.6f}"


class Evaluator:
    """Reconstructs a fixed image set through a trained system and caches
    the result per ``(k_s, k_d)`` so sweeps that share points share work.

    Every reconstruction call reseeds its generator from ``seed``, so a
    point's result does not depend on which points were evaluated before it.
    """

    def __init__(self, system, images: torch.Tensor, labels, channel: ChannelConfig,
                 guidance: GuidanceConfig = GuidanceConfig(), seed: int = 0, batch: int = 64):
        self.system = system
        self.images = images
        self.labels = np.asarray(labels)
        self.channel = channel
        self.guidance = guidance
        self.seed = seed
        self.batch = batch
        self._recon: dict = {}
        self._reports: dict = {}

    def _run(self, idx: np.ndarray, k_s: int, k_d: int, guidance: GuidanceConfig) -> torch.Tensor:
        gen = torch.Generator().manual_seed(self.seed)
        out = []
        for i in range(0, len(idx), self.batch):
            x = self.images[torch.from_numpy(idx[i : i + self.batch])]
            out.append(self.system.reconstruct(x, k_s, k_d, self.channel, guidance, gen))
        return torch.cat(out)

    def reconstruct(self, k_s: int, k_d: int, guidance: GuidanceConfig | None = None) -> torch.Tensor:
        guidance = guidance or self.guidance
        key = (k_s, k_d, guidance.phi)
        if key not in self._recon:
            self._recon[key] = self._run(np.arange(len(self.images)), k_s, k_d, guidance)
        return self._recon[key]

    def reconstruct_per_image(self, allocations: Sequence[tuple[int, int]]) -> torch.Tensor:
        """Per-image rates: images sharing an allocation are decoded together."""
        allocations = [tuple(map(int, a)) for a in allocations]
        out = torch.empty_like(self.images)
        for alloc in sorted(set(allocations)):
            idx = np.array([i for i, a in enumerate(allocations) if a == alloc])
            out[torch.from_numpy(idx)] = self._run(idx, *alloc, self.guidance)
        return out

    def report(self, k_s: int, k_d: int, guidance: GuidanceConfig | None = None) -> MetricReport:
        guidance = guidance or self.guidance
        key = (k_s, k_d, guidance.phi)
        if key not in self._reports:
            x_hat = self.reconstruct(k_s, k_d, guidance)
            self._reports[key] = MetricReport.measure(self.images, x_hat, self.labels, self.system.extractor)
        return self._reports[key]

    def report_for(self, x_hat: torch.Tensor) -> MetricReport:
        return MetricReport.measure(self.images, x_hat, self.labels, self.system.extractor)


def half_split(k: int, ks_set: Sequence[int]) -> tuple[int, int]:
    """Semantic share closest to half the budget (ties toward fewer symbols)."""
    ks = min((c for c in ks_set if c <= k), key=lambda c: (abs(c - k / 2), c))
    return ks, k - ks


def _point_row(ev: Evaluator, k_s: int, k_d: int) -> list[str]:
    H = W = ev.images.shape[-1]
    k = k_s + k_d
    rep = ev.report(k_s, k_d)
    return [_fmt(cbr(k, H, W)), _fmt(k), _fmt(k_s), _fmt(k_d), _fmt(cbr(k_s, H, W)), _fmt(cbr(k_d, H, W))] + rep.row()


def sweep_cbr(ev: Evaluator, cbr_list: Sequence[float],
              split: Callable[[int], tuple[int, int]] | None = None) -> list[list[str]]:
    """One row per CBR point; the budget is split by ``split`` (default: half)."""
    H = W = ev.images.shape[-1]
    split = split or (lambda k: half_split(k, ev.system.cfg.candidates.ks_set))
    rows = []
    for rho in cbr_list:
        k = int(round(rho * 3 * H * W))
        rows.append(_point_row(ev, *split(k)))
    return rows


def branch_ablation(ev: Evaluator, pairs: Sequence[tuple[int, int]]) -> list[list[str]]:
    """One row per ``(k_s, k_d)`` pair; ``k_s = 0`` disables the semantic branch."""
    return [_point_row(ev, k_s, k_d) for k_s, k_d in pairs]


def ba_comparison(ev: Evaluator, strategies: dict[str, Sequence[tuple[int, int]]]) -> list[list[str]]:
    """Compare per-image allocation strategies over the evaluator's image set."""
    rows = []
    for name, allocs in strategies.items():
        allocs = np.asarray(allocs, dtype=np.int64)
        uniq = {tuple(a) for a in allocs.tolist()}
        if len(uniq) == 1:
            rep = ev.report(*uniq.pop())
        else:
            rep = ev.report_for(ev.reconstruct_per_image(allocs.tolist()))
        total = allocs.sum(1)
        rows.append([name, _fmt(total.mean()), _fmt(allocs[:, 0].mean()), _fmt(allocs[:, 1].mean())] + rep.row())
    return rows


def write_csv(path, header, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def plot_sweep(path, rows, x_col: str = "cbr", y_col: str = "feat_cos", header=SWEEP_HEADER) -> None:
    """Line plot of one column against another, written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xi, yi = header.index(x_col), header.index(y_col)
    xs = [float(r[xi]) for r in rows]
    ys = [float(r[yi]) for r in rows]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(x_col)
    ax.set_ylabel(y_col)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
