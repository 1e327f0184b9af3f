"""Procedural 32x32 toy images with template captions.

Every image shows 1-4 shapes of a single type (the class label) in assorted
colors over a textured background. Captions list the objects, so longer
captions mean busier scenes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = ["ToyCorpus", "make_toy_corpus", "SHAPES", "caption_for"]

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.15),
    "magenta": (0.90, 0.20, 0.85),
    "cyan": (0.15, 0.85, 0.90),
    "white": (0.97, 0.97, 0.97),
    "orange": (0.98, 0.55, 0.10),
}
BACKGROUNDS = {
    "gray": (0.45, 0.45, 0.45),
    "navy": (0.10, 0.12, 0.35),
    "olive": (0.35, 0.38, 0.12),
    "brown": (0.38, 0.22, 0.12),
}
TEXTURES = ("striped", "checkered", "speckled", "wavy")
NUMBERS = ("one", "two", "three", "four")
VPOS = ("top", "middle", "bottom")
HPOS = ("left", "center", "right")


@dataclass
class ToyCorpus:
    images: np.ndarray  # (M, 32, 32, 3) uint8
    labels: np.ndarray  # (M,) shape class
    counts: np.ndarray  # (M,) objects per image
    captions: list[str]

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ToyCorpus":
        idx = np.asarray(idx)
        return ToyCorpus(self.images[idx], self.labels[idx], self.counts[idx], [self.captions[i] for i in idx])

    def split(self, n_test: int) -> tuple["ToyCorpus", "ToyCorpus"]:
        """Disjoint (train, test); the test part is the last ``n_test`` images."""
        n = len(self)
        if not 0 < n_test < n:
            raise ValueError("n_test must leave both parts non-empty")
        return self.subset(np.arange(n - n_test)), self.subset(np.arange(n - n_test, n))

    def stratified(self, per_count: int) -> "ToyCorpus":
        """First ``per_count`` images of each object count, in corpus order."""
        idx = []
        for c in sorted(set(self.counts.tolist())):
            hits = np.flatnonzero(self.counts == c)[:per_count]
            if len(hits) < per_count:
                raise ValueError(f"only {len(hits)} images with {c} objects")
            idx.extend(hits.tolist())
        return self.subset(sorted(idx))

    def tensor(self, idx=None) -> torch.Tensor:
        """Images as float ``(B, 3, 32, 32)`` in [0, 1]."""
        imgs = self.images if idx is None else self.images[idx]
        return torch.from_numpy(imgs).permute(0, 3, 1, 2).float().div(255.0)


def _shape_mask(shape: str, cy: float, cx: float, r: float, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy**2 + dx**2 <= r**2
    if shape == "square":
        return (np.abs(dy) <= 0.85 * r) & (np.abs(dx) <= 0.85 * r)
    if shape == "triangle":
        # apex up, base at cy + r
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "cross":
        arm = 0.35 * r
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    raise ValueError(shape)


def _texture(kind: str, rng: np.random.Generator, yy, xx) -> np.ndarray:
    if kind == "striped":
        period = rng.uniform(3.0, 6.0)
        theta = rng.uniform(0, np.pi)
        return np.sign(np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period))
    if kind == "checkered":
        cell = int(rng.integers(2, 5))
        return np.where(((yy // cell) + (xx // cell)) % 2 == 0, 1.0, -1.0)
    if kind == "speckled":
        return rng.uniform(-1.0, 1.0, size=yy.shape)
    phase = rng.uniform(0, 2 * np.pi)
    return np.sin(xx / 2.5 + 2.0 * np.sin(yy / 4.0 + phase))


def caption_for(shape: str, texture: str, objects: list[tuple[str, str, str]]) -> str:
    n = len(objects)
    noun = shape if n == 1 else shape + ("es" if shape.endswith("s") else "s")
    first = f"{NUMBERS[n - 1]} {noun} on a {texture} background."
    parts = [f"a {color} {shape} at the {v} {h}" for color, v, h in objects]
    return f"{first} there is {' and '.join(parts)}."


def _render(rng: np.random.Generator, label: int, n_obj: int, size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    bg_name = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
    texture = TEXTURES[rng.integers(len(TEXTURES))]
    img = np.empty((size, size, 3))
    img[:] = BACKGROUNDS[bg_name]
    img += 0.12 * _texture(texture, rng, yy, xx)[..., None]
    shape = SHAPES[label]
    objects = []
    for _ in range(n_obj):
        r = rng.uniform(3.5, 6.5)
        cy, cx = rng.uniform(r, size - r, size=2)
        color = list(COLORS)[rng.integers(len(COLORS))]
        img[_shape_mask(shape, cy, cx, r, yy, xx)] = COLORS[color]
        objects.append((color, VPOS[min(int(cy * 3 // size), 2)], HPOS[min(int(cx * 3 // size), 2)]))
    img = np.clip(img, 0.0, 1.0)
    return (img * 255.0 + 0.5).astype(np.uint8), caption_for(shape, texture, objects)


def make_toy_corpus(seed: int, M: int, size: int = 32) -> ToyCorpus:
    if M < 2:
        raise ValueError("corpus needs at least two images")
    rng = np.random.default_rng(seed)
    labels = rng.integers(len(SHAPES), size=M)
    counts = rng.integers(1, 5, size=M)
    images = np.empty((M, size, size, 3), dtype=np.uint8)
    captions = []
    for i in range(M):
        images[i], cap = _render(rng, int(labels[i]), int(counts[i]), size)
        captions.append(cap)
    return ToyCorpus(images, labels.astype(np.int64), counts.astype(np.int64), captions)
