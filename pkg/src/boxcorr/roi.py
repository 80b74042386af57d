"""Box features from channels-last feature maps.

Normalized coordinate ``u`` maps to feature coordinate ``u * S - 0.5`` on a
map of side ``S`` (pixel centers at integers).  RoIAlign takes one bilinear
sample at the center of each of ``c x c`` equal bins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import BoxXYXY, GeometryError, ViewTransform, intersect, project_array
from .tensor import Tensor, bilinear_weights, weighted_gather

KINDS = ("ra1", "raC", "avg", "shared_grid")


@dataclass
class RoiMode:
    kind: str = "ra1"
    c: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown RoI mode {self.kind!r}; expected one of {KINDS}")
        if self.c < 1:
            raise ValueError(f"RoI bins must be >= 1, got {self.c}")
        if self.kind in ("ra1", "avg"):
            self.c = 1

    @property
    def bins(self) -> int:
        return self.c if self.kind in ("raC",) else 1

    def feature_dim(self, channels: int) -> int:
        return self.bins * self.bins * channels

    @classmethod
    def parse(cls, text: str) -> "RoiMode":
        """``ra1``, ``ra3``, ``avg``, ``grid2`` style names."""
        if text in ("ra1", "avg"):
            return cls(text)
        if text.startswith("ra") and text[2:].isdigit():
            c = int(text[2:])
            return cls("ra1") if c == 1 else cls("raC", c)
        if text.startswith("grid") and text[4:].isdigit():
            return cls("shared_grid", int(text[4:]))
        raise ValueError(f"cannot parse RoI mode {text!r}")

    @property
    def name(self) -> str:
        if self.kind == "raC":
            return f"ra{self.c}"
        if self.kind == "shared_grid":
            return f"grid{self.c}"
        return self.kind


def _bin_centers(boxes: np.ndarray, h: int, w: int, c: int):
    """Feature-space sample positions, shape (P, c, c) each for x and y."""
    offs = (np.arange(c) + 0.5) / c
    x1, y1, x2, y2 = (boxes[:, i : i + 1] for i in range(4))
    fx = (x1 + offs * (x2 - x1)) * w - 0.5
    fy = (y1 + offs * (y2 - y1)) * h - 0.5
    xs = np.broadcast_to(fx[:, None, :], (len(boxes), c, c))
    ys = np.broadcast_to(fy[:, :, None], (len(boxes), c, c))
    return xs, ys


def roi_align_batch(fmaps: Tensor, batch_idx, boxes, c: int = 1) -> Tensor:
    """RoIAlign of ``boxes[p]`` on ``fmaps[batch_idx[p]]``; returns ``(P, c*c*C)``.

    ``fmaps`` is (N, H, W, C), boxes are normalized xyxy in the map's frame.
    """
    n, h, w, ch = fmaps.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    batch_idx = np.asarray(batch_idx, dtype=np.intp).reshape(-1)
    p = len(boxes)
    xs, ys = _bin_centers(boxes, h, w, c)
    idx, wts = bilinear_weights(h, w, xs.reshape(-1), ys.reshape(-1))
    idx = idx + np.repeat(batch_idx, c * c)[:, None] * (h * w)
    out = weighted_gather(T.reshape(fmaps, (n * h * w, ch)), idx, wts)
    return T.reshape(out, (p, c * c * ch))


def roi_align(fmap: Tensor, box, c: int = 1) -> Tensor:
    """RoIAlign of one box on an (H, W, C) map; returns ``(c, c, C)``."""
    b = box.as_array() if isinstance(box, BoxXYXY) else np.asarray(box, dtype=np.float64)
    h, w, ch = fmap.shape
    out = roi_align_batch(T.reshape(fmap, (1, h, w, ch)), [0], b[None], c)
    return T.reshape(out, (c, c, ch))


def _overlap_range(lo: float, hi: float, size: int) -> tuple[int, int]:
    first = min(max(math.floor(lo * size), 0), size - 1)
    last = min(max(math.ceil(hi * size) - 1, 0), size - 1)
    return first, max(first, last)


def avg_overlap_batch(fmaps: Tensor, batch_idx, boxes) -> Tensor:
    """Mean of all cells whose extent overlaps each box with positive area."""
    n, h, w, ch = fmaps.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    batch_idx = np.asarray(batch_idx, dtype=np.intp).reshape(-1)
    cells = []
    for b, nb in zip(boxes, batch_idx):
        c0, c1 = _overlap_range(b[0], b[2], w)
        r0, r1 = _overlap_range(b[1], b[3], h)
        rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
        cells.append((nb * h * w + rr * w + cc).ravel())
    m = max((len(x) for x in cells), default=1)
    idx = np.zeros((len(cells), m), dtype=np.intp)
    wts = np.zeros((len(cells), m))
    for row, x in enumerate(cells):
        idx[row, : len(x)] = x
        wts[row, : len(x)] = 1.0 / len(x)
    return weighted_gather(T.reshape(fmaps, (n * h * w, ch)), idx, wts)


def avg_overlap(fmap: Tensor, box) -> Tensor:
    b = box.as_array() if isinstance(box, BoxXYXY) else np.asarray(box, dtype=np.float64)
    h, w, ch = fmap.shape
    return avg_overlap_batch(T.reshape(fmap, (1, h, w, ch)), [0], b[None])[0]


def extract(fmaps: Tensor, batch_idx, boxes, mode: RoiMode) -> Tensor:
    """Box features ``(P, D)`` for the configured mode."""
    if mode.kind == "avg":
        return avg_overlap_batch(fmaps, batch_idx, boxes)
    return roi_align_batch(fmaps, batch_idx, boxes, mode.bins)


def shared_grid_boxes(t_i: ViewTransform, t_j: ViewTransform, c: int):
    """``c x c`` grid tiling the shared area of two views, in each view's frame.

    Returns two ``(c*c, 4)`` arrays (row-major grid order).
    """
    shared = intersect(t_i.crop, t_j.crop)
    if shared is None:
        raise GeometryError(f"views do not overlap: {t_i.crop} and {t_j.crop}")
    xs = np.linspace(shared.x1, shared.x2, c + 1)
    ys = np.linspace(shared.y1, shared.y2, c + 1)
    grid = np.array([[xs[q], ys[r], xs[q + 1], ys[r + 1]] for r in range(c) for q in range(c)])
    bi = np.clip(project_array(grid, t_i), 0.0, 1.0)
    bj = np.clip(project_array(grid, t_j), 0.0, 1.0)
    return bi, bj
