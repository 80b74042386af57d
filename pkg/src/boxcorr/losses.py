"""Box-level BYOL objective and the two box-localization auxiliary losses.

Embeddings for a batch live in row tables; :class:`PairGroups` records, for
every image and ordered view pair ``(i, j)``, which rows hold the boxes in
``B_i ∩ B_j`` on each side.  The losses are weighted sums over those rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from . import tensor as T
from .geometry import cxcywh_to_xyxy_tensor, giou_tensor
from .tensor import Tensor

AUX_MODES = ("none", "prediction", "regression")


@dataclass
class LossConfig:
    normalize_features: bool = True
    tau: float = 0.1
    lam: float = 0.0
    lambda_giou: float = 2.0
    lambda_box: float = 5.0
    aux_mode: str = "none"

    def validate(self) -> None:
        from .augmentation import ConfigError

        if not self.tau > 0:
            raise ConfigError("tau", f"must be positive, got {self.tau}")
        for name in ("lam", "lambda_giou", "lambda_box"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be non-negative, got {getattr(self, name)}")
        if self.aux_mode not in AUX_MODES:
            raise ConfigError("aux_mode", f"must be one of {AUX_MODES}, got {self.aux_mode!r}")


@dataclass
class LossBreakdown:
    l_byol: float = 0.0
    l_box_pred: float = 0.0
    l_box_reg: float = 0.0
    total: float = 0.0
    pair_count: int = 0


@dataclass
class PairGroups:
    """Padded row indices of matched boxes, one group per (image, ordered pair)."""

    src: np.ndarray
    dst: np.ndarray
    mask: np.ndarray
    image: np.ndarray
    n_images: int
    pairs: list = field(default_factory=list)

    @property
    def sizes(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @property
    def pair_count(self) -> int:
        """Matched (i, j, k) triples."""
        return int(self.mask.sum())

    def pairs_per_image(self) -> np.ndarray:
        return np.bincount(self.image, minlength=self.n_images)

    def rows(self, group_weight: np.ndarray):
        """Flat (src, dst, weight) with each group's weight split over its rows."""
        per_row = np.repeat(group_weight / np.maximum(self.sizes, 1), self.mask.shape[1]).reshape(self.mask.shape)
        return self.src[self.mask], self.dst[self.mask], per_row[self.mask]


def match_groups(matches: list, n_images: int) -> PairGroups:
    """Build groups from ``[(image, i, j, src_rows, dst_rows), ...]``; empty groups are dropped."""
    matches = [m for m in matches if len(m[3])]
    width = max((len(m[3]) for m in matches), default=1)
    g = len(matches)
    src = np.zeros((g, width), dtype=np.intp)
    dst = np.zeros((g, width), dtype=np.intp)
    mask = np.zeros((g, width), dtype=bool)
    image = np.zeros(g, dtype=np.intp)
    for row, (n, _, _, s, d) in enumerate(matches):
        src[row, : len(s)] = s
        dst[row, : len(d)] = d
        mask[row, : len(s)] = True
        image[row] = n
    return PairGroups(src, dst, mask, image, n_images, [(m[0], m[1], m[2]) for m in matches])


def view_pair_groups(valid_sets_per_image: list, row_of: dict) -> PairGroups:
    """Groups for every ordered pair of distinct views of every image.

    ``row_of[(n, i, k)]`` gives the table row of box ``k`` in view ``i`` of image ``n``.
    """
    matches = []
    for n, valid_sets in enumerate(valid_sets_per_image):
        for i, j in permutations(range(len(valid_sets)), 2):
            common = sorted(set(valid_sets[i]) & set(valid_sets[j]))
            matches.append((n, i, j, [row_of[(n, i, k)] for k in common], [row_of[(n, j, k)] for k in common]))
    return match_groups(matches, len(valid_sets_per_image))


def single_image_groups(valid_sets: list) -> tuple[PairGroups, dict]:
    """Groups for one image whose per-view tables are stacked in view order."""
    row_of, row = {}, 0
    for i, vs in enumerate(valid_sets):
        for k in vs:
            row_of[(0, i, k)] = row
            row += 1
    return view_pair_groups([valid_sets], row_of), row_of


# ---------------------------------------------------------------- losses


def byol_groups_loss(pred: Tensor, target, groups: PairGroups, normalize: bool = True) -> Tensor:
    """Sum over ordered pairs of the mean squared distance, averaged over images."""
    target = T.as_tensor(target, like=pred)
    if normalize:
        pred = T.l2_normalize(pred, axis=-1)
        target = T.l2_normalize(target, axis=-1)
    src, dst, w = groups.rows(np.full(len(groups.src), 1.0 / max(groups.n_images, 1)))
    if not len(src):
        return Tensor(np.zeros((), dtype=pred.dtype))
    diff = pred[src] - target[dst]
    per_row = T.sum_(diff * diff, axis=1)
    return T.sum_(per_row * w.astype(pred.dtype))


def byol_loss(online: list, target: list, valid_sets: list, normalize: bool = True) -> tuple[Tensor, int]:
    """Per-image loss from per-view tables ``online[i]`` (rows in ``valid_sets[i]`` order).

    ``online`` holds predictor outputs, ``target`` the target projections.
    Returns the loss and the number of ordered pairs with a shared box.
    """
    groups, _ = single_image_groups(valid_sets)
    pred = T.concat(online, axis=0)
    tgt = np.concatenate([np.asarray(t.data if isinstance(t, Tensor) else t) for t in target], axis=0)
    return byol_groups_loss(pred, tgt, groups, normalize), len(groups.src)


def box_prediction_groups_loss(u_src: Tensor, u_dst: Tensor, groups: PairGroups, tau: float) -> Tensor:
    """Contrastive box identification within each ordered pair.

    Per pair the cross-entropy is averaged over its boxes; pairs are averaged
    per image and images averaged over the batch.
    """
    if not len(groups.src):
        return Tensor(np.zeros((), dtype=u_src.dtype))
    a = T.l2_normalize(u_src, axis=-1)[groups.src]
    b = T.l2_normalize(u_dst, axis=-1)[groups.dst]
    logits = (a @ T.transpose(b, (0, 2, 1))) * (1.0 / tau)
    g, m = groups.mask.shape
    blocked = np.where(groups.mask[:, None, :], 0.0, -1e4).astype(u_src.dtype)
    logp = T.log_softmax(logits + np.broadcast_to(blocked, (g, m, m)).copy(), axis=-1)
    gi, ki = np.nonzero(groups.mask)
    picked = logp[gi, ki, ki]
    per_image = groups.pairs_per_image()
    group_w = 1.0 / (per_image[groups.image] * groups.n_images)
    w = (group_w / groups.sizes)[gi].astype(u_src.dtype)
    return -T.sum_(picked * w)


def box_prediction_loss(u_i: Tensor, u_j: Tensor, tau: float = 0.1) -> Tensor:
    """Mean over ``k`` of ``-log softmax_k'(sim(u_i^k, u_j^k') / tau)`` at ``k' = k``.

    Rows of ``u_i`` and ``u_j`` are the matched boxes in the same order.
    """
    u_i, u_j = T.as_tensor(u_i), T.as_tensor(u_j)
    k = u_i.shape[0]
    groups = match_groups([(0, 0, 1, list(range(k)), list(range(k)))], 1)
    return box_prediction_groups_loss(u_i, u_j, groups, tau)


def box_regression_loss(pred: Tensor, true, weights=None, lambda_giou: float = 2.0, lambda_box: float = 5.0) -> Tensor:
    """Weighted sum of ``lambda_giou * (1 - GIoU) + lambda_box * L1`` over cxcywh rows.

    ``weights`` defaults to the mean over rows.
    """
    pred = T.as_tensor(pred)
    true = T.as_tensor(np.asarray(true, dtype=pred.dtype).reshape(-1, 4))
    p = pred.shape[0]
    if p == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    w = np.full(p, 1.0 / p) if weights is None else np.asarray(weights, dtype=np.float64)
    g = giou_tensor(cxcywh_to_xyxy_tensor(pred), cxcywh_to_xyxy_tensor(true))
    l1 = T.sum_(T.abs_(pred - true), axis=1)
    per_box = (1.0 - g) * lambda_giou + l1 * lambda_box
    return T.sum_(per_box * w.astype(pred.dtype))


def total_loss(l_byol: Tensor, cfg: LossConfig, l_box_pred: Tensor | None = None,
               l_box_reg: Tensor | None = None, pair_count: int = 0) -> tuple[Tensor, LossBreakdown]:
    """``l_byol + lam * aux`` where ``aux`` is the term chosen by ``aux_mode``."""
    aux = {"prediction": l_box_pred, "regression": l_box_reg}.get(cfg.aux_mode)
    total = l_byol
    if aux is not None and cfg.lam != 0:
        total = l_byol + aux * cfg.lam
    breakdown = LossBreakdown(
        l_byol=float(l_byol.data),
        l_box_pred=float(l_box_pred.data) if l_box_pred is not None else 0.0,
        l_box_reg=float(l_box_reg.data) if l_box_reg is not None else 0.0,
        total=float(total.data),
        pair_count=pair_count,
    )
    return total, breakdown
