"""Box algebra and the crop/flip box transform between frames.

Boxes are stored in normalized coordinates of a named frame.  Scalar helpers
take :class:`BoxXYXY`; the ``*_array`` variants work on ``(..., 4)`` arrays
and are what the sampling and training code uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class BoxXYXY:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite box {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise GeometryError(f"box corners out of order: {vals}")

    @classmethod
    def from_array(cls, arr) -> "BoxXYXY":
        return cls(*(float(v) for v in arr))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_cxcywh(self) -> "BoxCXCYWH":
        return BoxCXCYWH((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2, self.width, self.height)


@dataclass(frozen=True)
class BoxCXCYWH:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise GeometryError(f"box size must be positive: w={self.w}, h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def to_xyxy(self) -> BoxXYXY:
        return BoxXYXY(self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class PhotometricParams:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    blur_sigma: float = 0.0

    @property
    def is_identity(self) -> bool:
        return (self.brightness, self.contrast, self.saturation, self.blur_sigma) == (1.0, 1.0, 1.0, 0.0)


@dataclass(frozen=True)
class ViewTransform:
    crop: BoxXYXY
    hflip: bool = False
    photometric: PhotometricParams = field(default_factory=PhotometricParams)

    @classmethod
    def identity(cls) -> "ViewTransform":
        return cls(BoxXYXY(0.0, 0.0, 1.0, 1.0))


# ---------------------------------------------------------------- conversions


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return np.stack(
        [(b[..., 0] + b[..., 2]) / 2, (b[..., 1] + b[..., 3]) / 2, b[..., 2] - b[..., 0], b[..., 3] - b[..., 1]],
        axis=-1,
    )


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    hw, hh = b[..., 2] / 2, b[..., 3] / 2
    return np.stack([b[..., 0] - hw, b[..., 1] - hh, b[..., 0] + hw, b[..., 1] + hh], axis=-1)


# ---------------------------------------------------------------- box transform


def _crop_array(t: ViewTransform) -> np.ndarray:
    c = t.crop.as_array()
    if not (c[2] - c[0] > 0 and c[3] - c[1] > 0):
        raise GeometryError(f"degenerate crop {tuple(c)}")
    return c


def project_array(boxes: np.ndarray, t: ViewTransform) -> np.ndarray:
    """Map ``(..., 4)`` parent-frame boxes into the frame of view ``t``."""
    c = _crop_array(t)
    b = np.asarray(boxes, dtype=np.float64)
    w, h = c[2] - c[0], c[3] - c[1]
    x1 = (b[..., 0] - c[0]) / w
    x2 = (b[..., 2] - c[0]) / w
    y1 = (b[..., 1] - c[1]) / h
    y2 = (b[..., 3] - c[1]) / h
    if t.hflip:
        x1, x2 = 1.0 - x2, 1.0 - x1
    return np.stack([x1, y1, x2, y2], axis=-1)


def invert_array(boxes: np.ndarray, t: ViewTransform) -> np.ndarray:
    """Map ``(..., 4)`` view-frame boxes back into the parent frame of ``t``."""
    c = _crop_array(t)
    b = np.asarray(boxes, dtype=np.float64)
    x1, x2 = b[..., 0], b[..., 2]
    if t.hflip:
        x1, x2 = 1.0 - x2, 1.0 - x1
    w, h = c[2] - c[0], c[3] - c[1]
    return np.stack([c[0] + x1 * w, c[1] + b[..., 1] * h, c[0] + x2 * w, c[1] + b[..., 3] * h], axis=-1)


def project_box(b: BoxXYXY, t: ViewTransform) -> BoxXYXY:
    return BoxXYXY.from_array(project_array(b.as_array(), t))


def invert_project(b: BoxXYXY, t: ViewTransform) -> BoxXYXY:
    return BoxXYXY.from_array(invert_array(b.as_array(), t))


def compose(outer: ViewTransform, inner: ViewTransform) -> ViewTransform:
    """Single transform equal to projecting through ``outer`` then ``inner``.

    Photometric parameters of ``inner`` are kept; only geometry composes.
    """
    crop = invert_project(inner.crop, outer)
    return ViewTransform(crop, outer.hflip != inner.hflip, inner.photometric)


def is_valid_array(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return (
        (b[..., 0] >= 0) & (b[..., 0] < b[..., 2]) & (b[..., 2] <= 1)
        & (b[..., 1] >= 0) & (b[..., 1] < b[..., 3]) & (b[..., 3] <= 1)
    )


def is_valid(b) -> bool:
    """True iff the box lies completely inside its (unit) frame."""
    arr = b.as_array() if isinstance(b, BoxXYXY) else b
    return bool(is_valid_array(arr))


def intersect(a: BoxXYXY, b: BoxXYXY) -> BoxXYXY | None:
    x1, y1 = max(a.x1, b.x1), max(a.y1, b.y1)
    x2, y2 = min(a.x2, b.x2), min(a.y2, b.y2)
    if x1 < x2 and y1 < y2:
        return BoxXYXY(x1, y1, x2, y2)
    return None


# ---------------------------------------------------------------- overlap scores


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


def giou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1]) + (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1]) - inter
    hull = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * (
        np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    )
    return inter / union - (hull - union) / hull


def iou(a: BoxXYXY, b: BoxXYXY) -> float:
    return float(iou_array(a.as_array(), b.as_array()))


def giou(a: BoxXYXY, b: BoxXYXY) -> float:
    return float(giou_array(a.as_array(), b.as_array()))


def giou_tensor(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    """Differentiable GIoU of row-aligned ``(P, 4)`` xyxy tensors; returns ``(P,)``."""
    ax1, ay1, ax2, ay2 = (a[:, i] for i in range(4))
    bx1, by1, bx2, by2 = (b[:, i] for i in range(4))
    iw = T.relu(T.minimum(ax2, bx2) - T.maximum(ax1, bx1))
    ih = T.relu(T.minimum(ay2, by2) - T.maximum(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (T.maximum(ax2, bx2) - T.minimum(ax1, bx1)) * (T.maximum(ay2, by2) - T.minimum(ay1, by1))
    return inter / union - (hull - union) / hull


def cxcywh_to_xyxy_tensor(b: T.Tensor) -> T.Tensor:
    cx, cy, w, h = (b[:, i : i + 1] for i in range(4))
    return T.concat([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


# ---------------------------------------------------------------- jitter


def jitter_array(box: np.ndarray, n: float, rng: np.random.Generator) -> np.ndarray:
    """Perturb each coordinate by uniform noise of relative size ``n``.

    Results are clamped to the unit frame; an axis whose corners cross after
    perturbation keeps its original coordinates, so every output coordinate
    stays within the relative bound.
    """
    if n < 0:
        raise GeometryError(f"jitter rate must be non-negative, got {n}")
    b = np.asarray(box, dtype=np.float64)
    if n == 0:
        return b.copy()
    noise = rng.uniform(-1.0, 1.0, size=4) * n * np.abs(b)
    out = np.clip(b + noise, 0.0, 1.0)
    for lo, hi in ((0, 2), (1, 3)):
        if not out[lo] < out[hi]:
            out[lo], out[hi] = b[lo], b[hi]
    return out


def jitter_box(b: BoxXYXY, n: float, rng: np.random.Generator) -> BoxXYXY:
    return BoxXYXY.from_array(jitter_array(b.as_array(), n, rng))
