"""Caption-complexity bandwidth allocation.

Each caption is summarized by word count, lexical diversity and mean tokens
per sentence. The three metrics are min-max normalized over a calibration
set, blended into one score in [0, 1], and the score shifts the semantic
branch's symbol budget around a fixed baseline split.

Tokenization: lowercase, split on whitespace, strip leading and trailing
punctuation from every token, drop tokens that end up empty. Sentences are
split on ``.``, ``!`` and ``?``; empty fragments are dropped.
"""
from __future__ import annotations

import math
import re
import string
from dataclasses import dataclass
from typing import Sequence

from .channel import cbr

__all__ = [
    "ComplexityMetrics",
    "KCWeights",
    "NormStats",
    "AllocationConfig",
    "BandwidthAllocation",
    "tokenize",
    "split_sentences",
    "analyze",
    "kc_score",
    "fit_norm_stats",
    "allocate",
    "snap",
]

_SENTENCE_END = re.compile(r"[.!?]")


def tokenize(text: str) -> list[str]:
    tokens = (tok.strip(string.punctuation) for tok in text.lower().split())
    return [tok for tok in tokens if tok]


def split_sentences(text: str) -> list[list[str]]:
    sentences = (tokenize(frag) for frag in _SENTENCE_END.split(text))
    return [s for s in sentences if s]


@dataclass(frozen=True)
class ComplexityMetrics:
    wc: int
    ld: float
    sc: float

    def as_tuple(self):
        return (float(self.wc), self.ld, self.sc)


def analyze(caption: str) -> ComplexityMetrics:
    words = tokenize(caption)
    if not words:
        return ComplexityMetrics(0, 0.0, 0.0)
    sentences = split_sentences(caption)
    sc = sum(len(s) for s in sentences) / len(sentences)
    return ComplexityMetrics(len(words), len(set(words)) / len(words), sc)


@dataclass(frozen=True)
class KCWeights:
    d_wc: float = 1 / 3
    d_ld: float = 1 / 3
    d_sc: float = 1 / 3

    def __post_init__(self):
        ws = (self.d_wc, self.d_ld, self.d_sc)
        if any(w < 0 or w > 1 for w in ws) or not math.isclose(sum(ws), 1.0, abs_tol=1e-9):
            raise ValueError(f"weights must lie in [0, 1] and sum to 1, got {ws}")


@dataclass(frozen=True)
class NormStats:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def normalize(self, values) -> tuple[float, ...]:
        out = []
        for v, lo, hi in zip(values, self.lo, self.hi):
            # degenerate range -> neutral midpoint
            out.append(0.5 if hi == lo else min(max((v - lo) / (hi - lo), 0.0), 1.0))
        return tuple(out)


def kc_score(m: ComplexityMetrics, w: KCWeights, stats: NormStats) -> float:
    n_wc, n_ld, n_sc = stats.normalize(m.as_tuple())
    return w.d_wc * n_wc + w.d_ld * n_ld + w.d_sc * n_sc


def fit_norm_stats(captions: Sequence[str], weights: KCWeights = KCWeights()) -> tuple[NormStats, float]:
    """Per-metric min/max over the calibration captions and their mean score."""
    if not captions:
        raise ValueError("need at least one caption to fit normalization statistics")
    metrics = [analyze(c).as_tuple() for c in captions]
    cols = list(zip(*metrics))
    stats = NormStats(tuple(min(c) for c in cols), tuple(max(c) for c in cols))
    scores = [kc_score(analyze(c), weights, stats) for c in captions]
    return stats, math.fsum(scores) / len(scores)


@dataclass(frozen=True)
class AllocationConfig:
    k: int
    k_bar_s: int
    eta: float = 0.5
    I_bar: float = 0.5
    H: int = 32
    W: int = 32

    def __post_init__(self):
        if not 0 <= self.k_bar_s <= self.k:
            raise ValueError("need 0 <= k_bar_s <= k")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")


@dataclass(frozen=True)
class BandwidthAllocation:
    k_s: int
    k_d: int
    k: int
    rho_s: float
    rho_d: float


def snap(k_s: int, candidates: Sequence[int], budget: int) -> int:
    """Nearest admissible value not above ``budget``; ties go to the smaller."""
    admissible = sorted(c for c in candidates if c <= budget)
    if not admissible:
        raise ValueError(f"no admissible semantic rate fits the budget {budget}")
    return min(admissible, key=lambda c: (abs(c - k_s), c))


def allocate(I: float, cfg: AllocationConfig, ks_candidates: Sequence[int] | None = None) -> BandwidthAllocation:
    # round first so products that should be integral do not ceil upward
    offset = math.ceil(round(cfg.eta * (I - cfg.I_bar) * cfg.k_bar_s, 9))
    k_s = min(max(cfg.k_bar_s + offset, 0), cfg.k)
    if ks_candidates is not None:
        k_s = snap(k_s, ks_candidates, cfg.k)
    k_d = cfg.k - k_s
    return BandwidthAllocation(k_s, k_d, cfg.k, cbr(k_s, cfg.H, cfg.W), cbr(k_d, cfg.H, cfg.W))
