"""Synthetic scenes standing in for a natural-image corpus.

Each image is a noisy two-color gradient with 2-5 filled rectangles,
ellipses or triangles.  Shape boxes are returned as metadata for diagnostics;
training only ever receives the pixel arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BoxXYXY

SHAPES = ("rect", "ellipse", "triangle")

TRAIN = 0
EVAL = 1


@dataclass
class SynthSpec:
    canvas_size: int = 96
    min_shapes: int = 2
    max_shapes: int = 5
    noise: float = 0.04
    seed: int = 0

    def validate(self) -> None:
        from .augmentation import ConfigError

        if self.canvas_size < 8:
            raise ConfigError("canvas_size", f"must be at least 8, got {self.canvas_size}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("min_shapes", f"need 1 <= min_shapes <= max_shapes, got {self.min_shapes}, {self.max_shapes}")
        if self.noise < 0:
            raise ConfigError("noise", f"must be non-negative, got {self.noise}")


@dataclass(frozen=True)
class ShapeInfo:
    kind: str
    box: BoxXYXY
    color: tuple


def item_rng(seed: int, split: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one item; train and eval splits never share a stream."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(split, stream, index)))


def render_scene(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, list]:
    s = spec.canvas_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    angle = rng.uniform(0, 2 * np.pi)
    ramp = ((xx - s / 2) * np.cos(angle) + (yy - s / 2) * np.sin(angle)) / s + 0.5
    c0, c1 = rng.uniform(0.0, 1.0, size=(2, 3))
    img = c0 + np.clip(ramp, 0, 1)[..., None] * (c1 - c0)
    shapes = []
    for _ in range(rng.integers(spec.min_shapes, spec.max_shapes + 1)):
        kind = SHAPES[rng.integers(len(SHAPES))]
        w, h = rng.uniform(0.15, 0.45, size=2) * s
        x1 = rng.uniform(0, s - w)
        y1 = rng.uniform(0, s - h)
        x2, y2 = x1 + w, y1 + h
        color = rng.uniform(0.0, 1.0, size=3)
        if kind == "rect":
            mask = (xx >= x1) & (xx <= x2) & (yy >= y1) & (yy <= y2)
        elif kind == "ellipse":
            cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
            mask = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1
        else:
            apex = rng.uniform(x1, x2)
            t = np.clip((yy - y1) / h, 0, 1)
            left = apex + (x1 - apex) * t
            right = apex + (x2 - apex) * t
            mask = (yy >= y1) & (yy <= y2) & (xx >= left) & (xx <= right)
        img[mask] = color
        shapes.append(ShapeInfo(kind, BoxXYXY(x1 / s, y1 / s, x2 / s, y2 / s), tuple(float(c) for c in color)))
    if spec.noise:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), shapes


def generate_synth(spec: SynthSpec, n: int, split: int = TRAIN, start: int = 0):
    """``n`` images (n, S, S, 3) plus per-image shape metadata; deterministic per seed."""
    images, meta = [], []
    for idx in range(start, start + n):
        img, shapes = render_scene(spec, item_rng(spec.seed, split, idx))
        images.append(img)
        meta.append(shapes)
    s = spec.canvas_size
    arr = np.stack(images) if images else np.zeros((0, s, s, 3), dtype=np.float32)
    return arr, meta
