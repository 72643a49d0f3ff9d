"""Seeded synthetic image dataset: oriented bars and checkerboards on a noisy background."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import rngtape
from ..errors import ConfigError
from ..tensorgrad import dbpt

PATTERNS = ("horizontal", "vertical", "diagonal", "checker")
STROKE_ANGLES = (0.0, 90.0, 45.0, 135.0)
STYLES = ("bars", "strokes")


@dataclass(frozen=True)
class ToyDataset:
    images: np.ndarray          # [N, H, W] in [0, 1]
    labels: np.ndarray          # [N] int64
    generator_seed: int
    num_classes: int

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)

    def __len__(self):
        return len(self.labels)

    def subset(self, rows) -> "ToyDataset":
        return ToyDataset(self.images[rows], self.labels[rows], self.generator_seed, self.num_classes)


def _pattern(kind: str, size: int, period: float, phase: float) -> np.ndarray:
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    w = 2 * np.pi / period
    if kind == "horizontal":
        return np.sin(w * r + phase)
    if kind == "vertical":
        return np.sin(w * c + phase)
    if kind == "diagonal":
        return np.sin(w * (r + c) / np.sqrt(2) + phase)
    return np.sin(w * r + phase) * np.sin(w * c + phase)


def _stroke(size: int, angle_deg: float, center, length: float, width: float) -> np.ndarray:
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    th = np.deg2rad(angle_deg)
    d_r, d_c = -np.sin(th), np.cos(th)
    pr, pc = r - center[0], c - center[1]
    along = np.clip(pr * d_r + pc * d_c, -length / 2, length / 2)
    dist2 = (pr - along * d_r) ** 2 + (pc - along * d_c) ** 2
    return np.exp(-dist2 / (2 * width ** 2))


def synth_dataset(seed: int, n: int, image_size: int = 16, num_classes: int = 4,
                  noise_std: float = 0.08, period=(4.0, 8.0), amplitude=(0.25, 0.45),
                  brightness=(0.35, 0.65), style: str = "bars", length=(5.0, 9.0),
                  width: float = 0.6, distractors: int = 0, distractor_amplitude=(0.2, 0.4)) -> ToyDataset:
    """Class-conditional structured images; the same seed gives identical bytes.

    ``bars``: full-frame oriented gratings (or a checkerboard), class = pattern.
    ``strokes``: one thin line segment at a random position on a dark
    background, class = orientation.

    ``distractors`` adds that many small class-independent blobs per image.
    """
    if num_classes not in (2, 4):
        raise ConfigError("num_classes must be 2 or 4")
    if style not in STYLES:
        raise ConfigError(f"style must be one of {STYLES}")
    if image_size < 8:
        raise ConfigError("image_size must be >= 8")
    order = np.argsort(rngtape.uniform(seed, rngtape.ROLE_TRAIN, 0, n), kind="stable")
    labels = (order % num_classes).astype(np.int64)
    images = np.empty((n, image_size, image_size))
    for i in range(n):
        s = rngtape.derive_seed(seed, i)
        u = rngtape.uniform(s, rngtape.ROLE_TRAIN, 1, 4)
        per = period[0] + (period[1] - period[0]) * u[0]
        phase = 2 * np.pi * u[1]
        amp = amplitude[0] + (amplitude[1] - amplitude[0]) * u[2]
        base = brightness[0] + (brightness[1] - brightness[0]) * u[3]
        if style == "bars":
            img = base + amp * _pattern(PATTERNS[labels[i]], image_size, per, phase)
        else:
            v = rngtape.uniform(s, rngtape.ROLE_TRAIN, 3, 3)
            margin = 3.0
            center = margin + (image_size - 1 - 2 * margin) * v[:2]
            seg = length[0] + (length[1] - length[0]) * v[2]
            img = base + amp * _stroke(image_size, STROKE_ANGLES[labels[i]], center, seg, width)
        if distractors:
            w = rngtape.uniform(s, rngtape.ROLE_TRAIN, 4, 3 * distractors).reshape(distractors, 3)
            for pr, pc, pa in w:
                a = distractor_amplitude[0] + (distractor_amplitude[1] - distractor_amplitude[0]) * pa
                img = img + a * _stroke(image_size, 0.0, (pr * (image_size - 1), pc * (image_size - 1)), 0.0, width)
        img += noise_std * rngtape.gaussian(s, rngtape.ROLE_TRAIN, 2, (image_size, image_size))
        images[i] = np.clip(img, 0.0, 1.0)
    return ToyDataset(images, labels, int(seed), num_classes)


def save_dataset(ds: ToyDataset, path) -> None:
    dbpt.save(path, [ds.images, ds.labels.astype(np.float64),
                     np.array([float(ds.generator_seed % (1 << 53)), float(ds.num_classes)])])


def load_dataset(path, generator_seed: int = None) -> ToyDataset:
    images, labels, meta = dbpt.load_all(path)
    seed = int(meta[0]) if generator_seed is None else generator_seed
    return ToyDataset(images, labels.astype(np.int64), seed, int(meta[1]))
