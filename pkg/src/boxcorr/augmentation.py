"""View construction and box sampling.

A source image is cropped to a base view; ``V`` augmented views are cropped
from the base view, flipped, color-jittered, blurred and resized.  Boxes are
drawn in the base frame, projected into every view and kept only when they
fit completely inside at least two views.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import (
    BoxXYXY,
    PhotometricParams,
    ViewTransform,
    is_valid_array,
    jitter_array,
    project_array,
)
from .tensor import bilinear_weights

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A configuration field violates one of its invariants."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class AugmentationConfig:
    V: int = 2
    s_base: float = 0.9
    s_view: float = 0.6
    view_size: int = 64
    K: int = 8
    S_min: float = 0.0
    jitter_n: float = 0.0
    max_attempts: int | None = None
    local_views: int = 0
    local_view_size: int = 24
    brightness: tuple = (0.6, 1.4)
    contrast: tuple = (0.6, 1.4)
    saturation: tuple = (0.6, 1.4)
    blur_sigma: tuple = (0.1, 2.0)
    blur_p: float = 0.5
    flip_p: float = 0.5
    aspect: tuple = (3 / 4, 4 / 3)

    @property
    def attempts(self) -> int:
        return self.max_attempts if self.max_attempts is not None else 100 * self.K

    def validate(self) -> None:
        if self.V < 2:
            raise ConfigError("V", f"need at least 2 views, got {self.V}")
        if not self.s_view > 0.5:
            raise ConfigError("s_view", f"must exceed 0.5 so views pairwise overlap, got {self.s_view}")
        if not 0 < self.s_view <= 1:
            raise ConfigError("s_view", f"must lie in (0.5, 1], got {self.s_view}")
        if not 0 < self.s_base <= 1:
            raise ConfigError("s_base", f"must lie in (0, 1], got {self.s_base}")
        if not 0 <= self.S_min < 1:
            raise ConfigError("S_min", f"must lie in [0, 1), got {self.S_min}")
        if self.view_size <= 0:
            raise ConfigError("view_size", f"must be positive, got {self.view_size}")
        if self.K < 1:
            raise ConfigError("K", f"must be at least 1, got {self.K}")
        if self.jitter_n < 0:
            raise ConfigError("jitter_n", f"must be non-negative, got {self.jitter_n}")
        if self.local_views < 0:
            raise ConfigError("local_views", f"must be non-negative, got {self.local_views}")
        if self.local_views and self.local_view_size <= 0:
            raise ConfigError("local_view_size", f"must be positive, got {self.local_view_size}")
        if self.attempts < 1:
            raise ConfigError("max_attempts", f"must be at least 1, got {self.attempts}")


@dataclass
class BoxSample:
    boxes_base: np.ndarray
    boxes_per_view: list
    valid_sets: list

    @property
    def degenerate(self) -> bool:
        return len(self.boxes_base) == 0


@dataclass
class ViewSet:
    base_transform: ViewTransform
    images: list
    transforms: list
    boxes_base: np.ndarray
    boxes_per_view: list
    valid_sets: list
    local_images: list = field(default_factory=list)
    local_index: list = field(default_factory=list)

    @property
    def degenerate(self) -> bool:
        return len(self.boxes_base) == 0

    @property
    def V(self) -> int:
        return len(self.images)


# ---------------------------------------------------------------- pixels


def render_crop(image: np.ndarray, crop, size: int | tuple, hflip: bool = False) -> np.ndarray:
    """Bilinearly resample the normalized ``crop`` of ``image`` to ``size``."""
    h, w, c = image.shape
    oh, ow = (size, size) if isinstance(size, int) else size
    x1, y1, x2, y2 = crop.as_array() if isinstance(crop, BoxXYXY) else crop
    u = x1 + (np.arange(ow) + 0.5) / ow * (x2 - x1)
    v = y1 + (np.arange(oh) + 0.5) / oh * (y2 - y1)
    xs, ys = np.meshgrid(u * w - 0.5, v * h - 0.5)
    idx, wts = bilinear_weights(h, w, xs.ravel(), ys.ravel())
    flat = image.reshape(h * w, c).astype(np.float64)
    out = np.einsum("pm,pmc->pc", wts, flat[idx]).reshape(oh, ow, c)
    if hflip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out, dtype=np.float32)


def apply_photometric(image: np.ndarray, p: PhotometricParams) -> np.ndarray:
    if p.is_identity:
        return image.copy()
    x = image.astype(np.float64) * p.brightness
    x = (x - x.mean()) * p.contrast + x.mean()
    gray = x @ np.array([0.299, 0.587, 0.114])
    x = gray[..., None] + (x - gray[..., None]) * p.saturation
    x = np.clip(x, 0.0, 1.0)
    if p.blur_sigma > 0:
        x = gaussian_filter(x, sigma=(p.blur_sigma, p.blur_sigma, 0), mode="nearest", truncate=3.0)
    return x.astype(np.float32)


# ---------------------------------------------------------------- crops


def _random_crop(rng: np.random.Generator, min_scale: float, aspect: tuple, attempts: int) -> BoxXYXY:
    """Crop of area scale in ``[min_scale, 1]`` and aspect ratio in ``aspect``.

    Draws that do not fit the unit frame are redrawn; after ``attempts``
    failures the whole frame is returned.
    """
    log_lo, log_hi = math.log(aspect[0]), math.log(aspect[1])
    for _ in range(attempts):
        scale = rng.uniform(min_scale, 1.0)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = math.sqrt(scale * ratio)
        h = math.sqrt(scale / ratio)
        if w <= 1.0 and h <= 1.0:
            x1 = rng.uniform(0.0, 1.0 - w)
            y1 = rng.uniform(0.0, 1.0 - h)
            return BoxXYXY(x1, y1, x1 + w, y1 + h)
    return BoxXYXY(0.0, 0.0, 1.0, 1.0)


def sample_base_view(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator):
    """Random base crop of the source image, rendered at native resolution."""
    h, w, _ = image.shape
    if h < cfg.view_size or w < cfg.view_size:
        raise ValueError(f"source image {image.shape[:2]} smaller than view_size {cfg.view_size}")
    crop = _random_crop(rng, cfg.s_base, cfg.aspect, cfg.attempts)
    size = (max(1, round(crop.height * h)), max(1, round(crop.width * w)))
    return render_crop(image, crop, size), ViewTransform(crop)


def sample_photometric(cfg: AugmentationConfig, rng: np.random.Generator) -> PhotometricParams:
    b = rng.uniform(*cfg.brightness)
    c = rng.uniform(*cfg.contrast)
    s = rng.uniform(*cfg.saturation)
    sigma = rng.uniform(*cfg.blur_sigma) if rng.random() < cfg.blur_p else 0.0
    return PhotometricParams(b, c, s, sigma)


def sample_views(base: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator):
    """``V`` augmented views of the base image as ``(image, ViewTransform)`` pairs."""
    views = []
    for _ in range(cfg.V):
        crop = _random_crop(rng, cfg.s_view, cfg.aspect, cfg.attempts)
        hflip = bool(rng.random() < cfg.flip_p)
        t = ViewTransform(crop, hflip, sample_photometric(cfg, rng))
        views.append((render_view(base, t, cfg.view_size), t))
    return views


def render_view(base: np.ndarray, t: ViewTransform, size: int) -> np.ndarray:
    return apply_photometric(render_crop(base, t.crop, size, t.hflip), t.photometric)


# ---------------------------------------------------------------- boxes


def _candidate(rng: np.random.Generator, s_min: float) -> np.ndarray | None:
    xs = np.sort(rng.uniform(0.0, 1.0, size=2))
    ys = np.sort(rng.uniform(0.0, 1.0, size=2))
    if xs[1] - xs[0] < max(s_min, 1e-9) or ys[1] - ys[0] < max(s_min, 1e-9):
        return None
    return np.array([xs[0], ys[0], xs[1], ys[1]])


def sample_boxes(transforms, cfg: AugmentationConfig, rng: np.random.Generator) -> BoxSample:
    """Over-sample base-frame boxes, keeping those valid in at least two views."""
    kept, per_view = [], [dict() for _ in transforms]
    for _ in range(cfg.attempts):
        if len(kept) == cfg.K:
            break
        box = _candidate(rng, cfg.S_min)
        if box is None:
            continue
        box = jitter_array(box, cfg.jitter_n, rng)
        projected = [project_array(box, t) for t in transforms]
        valid = [bool(is_valid_array(p)) for p in projected]
        if sum(valid) < 2:
            continue
        k = len(kept)
        kept.append(box)
        for i, (p, ok) in enumerate(zip(projected, valid)):
            if ok:
                per_view[i][k] = p
    boxes = np.array(kept, dtype=np.float64).reshape(-1, 4)
    valid_sets = [sorted(d) for d in per_view]
    return BoxSample(boxes, per_view, valid_sets)


def build_local_views(base: np.ndarray, boxes_base: np.ndarray, cfg: AugmentationConfig):
    """Crop and resize one local view per box for the first ``local_views`` boxes."""
    count = min(cfg.local_views, len(boxes_base))
    images = [render_crop(base, boxes_base[k], cfg.local_view_size) for k in range(count)]
    return images, list(range(count))


def build_viewset(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> ViewSet:
    base, base_t = sample_base_view(image, cfg, rng)
    views = sample_views(base, cfg, rng)
    transforms = [t for _, t in views]
    boxes = sample_boxes(transforms, cfg, rng)
    local_images, local_index = build_local_views(base, boxes.boxes_base, cfg)
    vs = ViewSet(
        base_t,
        [img for img, _ in views],
        transforms,
        boxes.boxes_base,
        boxes.boxes_per_view,
        boxes.valid_sets,
        local_images,
        local_index,
    )
    if vs.degenerate:
        log.info("degenerate view set: no box fits two views after %d attempts", cfg.attempts)
    return vs
