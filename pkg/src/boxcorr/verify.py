"""Invariant and oracle suites behind ``boxcorr verify``.

Every oracle here is written with plain float64 loops or closed forms and
never calls the code path it checks.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .geometry import (
    BoxXYXY,
    ViewTransform,
    compose,
    giou_array,
    giou_tensor,
    iou_array,
    invert_array,
    project_array,
)
from .losses import (
    box_prediction_groups_loss,
    box_prediction_loss,
    box_regression_loss,
    byol_groups_loss,
    match_groups,
)
from .networks import decoder_forward, init_decoder, NetConfig
from .roi import avg_overlap_batch, roi_align, roi_align_batch

SUITES = ("grad", "geometry", "roi", "losses")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class GradCase:
    name: str
    fn: Callable
    sample: Callable


# ---------------------------------------------------------------- samplers


def _away_from_zero(rng, shape, lo=0.1, hi=2.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _separated_boxes(rng, n, margin=0.02):
    """Box pairs whose same-axis coordinates all differ by more than ``margin``."""
    a, b = [], []
    while len(a) < n:
        xa, ya, xb, yb = (np.sort(rng.uniform(0, 1, 2)) for _ in range(4))
        xs = np.concatenate([xa, xb])
        ys = np.concatenate([ya, yb])
        if np.min(np.diff(np.sort(xs))) < margin or np.min(np.diff(np.sort(ys))) < margin:
            continue
        a.append([xa[0], ya[0], xa[1], ya[1]])
        b.append([xb[0], yb[0], xb[1], yb[1]])
    return np.array(a), np.array(b)


def _project(out: T.Tensor, seed: int = 7) -> T.Tensor:
    """Reduce any output to a scalar with fixed random weights."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return T.sum_(out * w)


def _decoder_params():
    cfg = NetConfig(channels=(8,), strides=(1,), embed_dim=6, decoder_dim=4)
    return {k: T.Tensor(v.astype(np.float64)) for k, v in init_decoder(np.random.default_rng(3), cfg).items()}


_DEC = _decoder_params()
_GROUPS = match_groups([(0, 0, 1, [0, 1, 2], [3, 4, 5]), (0, 1, 0, [3, 4, 5], [0, 1, 2])], 1)


def grad_cases() -> list:
    pos = lambda rng, shape: rng.uniform(0.5, 2.0, size=shape)  # noqa: E731
    normal = lambda rng, shape: rng.normal(size=shape)  # noqa: E731
    return [
        GradCase("add", lambda a, b: _project(a + b), lambda r: [normal(r, (3, 4)), normal(r, (4,))]),
        GradCase("sub", lambda a, b: _project(a - b), lambda r: [normal(r, (3, 4)), normal(r, (3, 4))]),
        GradCase("mul", lambda a, b: _project(a * b), lambda r: [normal(r, (3, 4)), normal(r, (4,))]),
        GradCase("div", lambda a, b: _project(a / b), lambda r: [normal(r, (3, 4)), _away_from_zero(r, (3, 4), 0.5)]),
        GradCase("matmul", lambda a, b: _project(a @ b), lambda r: [normal(r, (2, 3, 4)), normal(r, (4, 5))]),
        GradCase("matmul_batched", lambda a, b: _project(a @ b), lambda r: [normal(r, (2, 3, 4)), normal(r, (2, 4, 2))]),
        GradCase(
            "conv2d",
            lambda x, w, b: _project(T.conv2d(x, w, b, stride=2, padding=1)),
            lambda r: [normal(r, (2, 5, 5, 2)), normal(r, (3, 3, 2, 3)), normal(r, (3,))],
        ),
        GradCase("relu", lambda x: _project(T.relu(x)), lambda r: [_away_from_zero(r, (3, 4))]),
        GradCase("sigmoid", lambda x: _project(T.sigmoid(x)), lambda r: [normal(r, (3, 4))]),
        GradCase("exp", lambda x: _project(T.exp(x)), lambda r: [normal(r, (3, 4))]),
        GradCase("log", lambda x: _project(T.log(x)), lambda r: [pos(r, (3, 4))]),
        GradCase("abs", lambda x: _project(T.abs_(x)), lambda r: [_away_from_zero(r, (3, 4))]),
        GradCase("sum", lambda x: _project(T.sum_(x, axis=1)), lambda r: [normal(r, (3, 4, 2))]),
        GradCase("mean", lambda x: _project(T.mean(x, axis=(0, 2))), lambda r: [normal(r, (3, 4, 2))]),
        GradCase("softmax", lambda x: _project(T.softmax(x, axis=-1)), lambda r: [normal(r, (3, 5))]),
        GradCase("log_softmax", lambda x: _project(T.log_softmax(x, axis=0)), lambda r: [normal(r, (3, 5))]),
        GradCase("l2_normalize", lambda x: _project(T.l2_normalize(x, axis=-1)), lambda r: [normal(r, (3, 5))]),
        GradCase("concat", lambda a, b: _project(T.concat([a, b], axis=1)), lambda r: [normal(r, (3, 2)), normal(r, (3, 4))]),
        GradCase("slice", lambda x: _project(x[1:, ::2]), lambda r: [normal(r, (4, 5))]),
        GradCase("gather", lambda x: _project(x[np.array([0, 2, 2, 1])]), lambda r: [normal(r, (3, 4))]),
        GradCase("transpose", lambda x: _project(T.transpose(x, (2, 0, 1))), lambda r: [normal(r, (2, 3, 4))]),
        GradCase("reshape", lambda x: _project(T.reshape(x, (4, 6))), lambda r: [normal(r, (2, 3, 4))]),
        GradCase("maximum", lambda a, b: _project(T.maximum(a, b)), _separated_pair),
        GradCase("minimum", lambda a, b: _project(T.minimum(a, b)), _separated_pair),
        GradCase(
            "bilinear_sample",
            lambda m: _project(T.bilinear_sample(m, 1.3, 0.6)),
            lambda r: [normal(r, (3, 4, 2))],
        ),
        GradCase(
            "roi_align",
            lambda m: _project(roi_align_batch(m, [0, 1], np.array([[0.1, 0.2, 0.7, 0.9], [0.3, 0.05, 0.95, 0.5]]), 3)),
            lambda r: [normal(r, (2, 4, 4, 3))],
        ),
        GradCase(
            "avg_overlap",
            lambda m: _project(avg_overlap_batch(m, [0, 1], np.array([[0.1, 0.2, 0.7, 0.9], [0.3, 0.05, 0.95, 0.5]]))),
            lambda r: [normal(r, (2, 4, 4, 3))],
        ),
        GradCase("giou", lambda a, b: _project(giou_tensor(a, b)), lambda r: list(_separated_boxes(r, 4))),
        GradCase(
            "byol_loss",
            lambda p, z: byol_groups_loss(p, z, _GROUPS, normalize=True),
            lambda r: [normal(r, (6, 5)), normal(r, (6, 5))],
        ),
        GradCase(
            "byol_loss_raw",
            lambda p, z: byol_groups_loss(p, z, _GROUPS, normalize=False),
            lambda r: [normal(r, (6, 5)), normal(r, (6, 5))],
        ),
        GradCase(
            "box_prediction_loss",
            lambda u: box_prediction_groups_loss(u, u, _GROUPS, tau=0.5),
            lambda r: [normal(r, (6, 5))],
        ),
        GradCase(
            "box_regression_loss",
            lambda p: box_regression_loss(p, _REG_TRUE, None, 2.0, 5.0),
            lambda r: [_regression_pred(r)],
        ),
        GradCase(
            "decoder",
            lambda m, q: _project(decoder_forward(m, [0, 1, 1], q, _DEC)),
            lambda r: [normal(r, (2, 2, 2, 8)), normal(r, (3, 6))],
        ),
    ]


_REG_TRUE = np.array([[0.5, 0.5, 0.4, 0.3], [0.3, 0.6, 0.2, 0.5], [0.7, 0.3, 0.3, 0.2]])


def _regression_pred(rng):
    """Predictions whose edges stay clear of the fixed targets' edges."""
    true_xyxy = np.concatenate([_REG_TRUE[:, :2] - _REG_TRUE[:, 2:] / 2, _REG_TRUE[:, :2] + _REG_TRUE[:, 2:] / 2], 1)
    while True:
        p = np.column_stack([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.15, 0.5, (3, 2))])
        pxy = np.concatenate([p[:, :2] - p[:, 2:] / 2, p[:, :2] + p[:, 2:] / 2], 1)
        gaps = [np.abs(pxy[:, a] - true_xyxy[:, b]) for a in range(4) for b in range(4) if a % 2 == b % 2]
        if min(g.min() for g in gaps) > 0.02 and np.all(np.abs(p - _REG_TRUE) > 0.02):
            return p


def _separated_pair(rng):
    a = rng.normal(size=(3, 4))
    return [a, a + _away_from_zero(rng, (3, 4))]


def run_grad_suite(cases=None, points: int = 10, seed: int = 0, eps: float = 1e-4, tol: float = 1e-4) -> list:
    checks = []
    for case in cases if cases is not None else grad_cases():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(points):
            report = T.grad_check(case.fn, case.sample(rng), eps=eps, tol=tol)
            worst = max(worst, report.max_rel_error)
        checks.append(Check(f"grad:{case.name}", worst <= tol, f"max relative error {worst:.3e}"))
    return checks


# ---------------------------------------------------------------- geometry


def random_transform(rng, flip: bool | None = None) -> ViewTransform:
    w, h = rng.uniform(0.2, 1.0, 2)
    x1, y1 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
    hflip = bool(rng.random() < 0.5) if flip is None else flip
    return ViewTransform(BoxXYXY(x1, y1, x1 + w, y1 + h), hflip)


def random_box(rng, lo=0.0, hi=1.0) -> np.ndarray:
    xs = np.sort(rng.uniform(lo, hi, 2))
    ys = np.sort(rng.uniform(lo, hi, 2))
    return np.array([xs[0], ys[0], xs[1], ys[1]])


def oracle_project(box, crop, hflip):
    x1, y1, x2, y2 = box
    cx1, cy1, cx2, cy2 = crop
    nx1, nx2 = (x1 - cx1) / (cx2 - cx1), (x2 - cx1) / (cx2 - cx1)
    if hflip:
        nx1, nx2 = 1 - nx2, 1 - nx1
    return [nx1, (y1 - cy1) / (cy2 - cy1), nx2, (y2 - cy1) / (cy2 - cy1)]


def oracle_iou_giou(a, b):
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    iou = inter / union
    return iou, iou - (hull - union) / hull


def run_geometry_suite(n_round: int = 10_000, n_pairs: int = 1_000, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    worst_rt = worst_comp = worst_proj = 0.0
    for _ in range(n_round):
        t = random_transform(rng)
        b = random_box(rng)
        p = project_array(b, t)
        worst_rt = max(worst_rt, float(np.max(np.abs(invert_array(p, t) - b))))
        worst_proj = max(worst_proj, float(np.max(np.abs(p - oracle_project(b, t.crop.as_array(), t.hflip)))))
        outer, inner = random_transform(rng), random_transform(rng)
        two_step = project_array(project_array(b, outer), inner)
        worst_comp = max(worst_comp, float(np.max(np.abs(two_step - project_array(b, compose(outer, inner))))))
    worst_iou = worst_giou = 0.0
    order_ok = True
    for _ in range(n_pairs):
        a, b = random_box(rng, -1, 2), random_box(rng, -1, 2)
        oi, og = oracle_iou_giou(a, b)
        ci, cg = float(iou_array(a, b)), float(giou_array(a, b))
        worst_iou = max(worst_iou, abs(ci - oi))
        worst_giou = max(worst_giou, abs(cg - og))
        order_ok &= cg <= ci + 1e-15
    return [
        Check("geometry:project_oracle", worst_proj <= 1e-9, f"max abs error {worst_proj:.2e}"),
        Check("geometry:round_trip", worst_rt <= 1e-9, f"max abs error {worst_rt:.2e} over {n_round}"),
        Check("geometry:composition", worst_comp <= 1e-9, f"max abs error {worst_comp:.2e} over {n_round}"),
        Check("geometry:iou_oracle", worst_iou <= 1e-9, f"max abs error {worst_iou:.2e} over {n_pairs}"),
        Check("geometry:giou_oracle", worst_giou <= 1e-9, f"max abs error {worst_giou:.2e} over {n_pairs}"),
        Check("geometry:giou_le_iou", bool(order_ok), f"{n_pairs} pairs"),
    ]


# ---------------------------------------------------------------- roi


def oracle_bilinear(fmap: np.ndarray, x: float, y: float) -> np.ndarray:
    h, w, _ = fmap.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    dx, dy = x - x0, y - y0
    return (
        fmap[y0, x0] * (1 - dx) * (1 - dy)
        + fmap[y0, x1] * dx * (1 - dy)
        + fmap[y1, x0] * (1 - dx) * dy
        + fmap[y1, x1] * dx * dy
    )


def oracle_roi_align(fmap: np.ndarray, box, c: int) -> np.ndarray:
    h, w, ch = fmap.shape
    x1, y1, x2, y2 = (float(v) for v in box)
    out = np.zeros((c, c, ch))
    for r in range(c):
        for q in range(c):
            u = x1 + (q + 0.5) * (x2 - x1) / c
            v = y1 + (r + 0.5) * (y2 - y1) / c
            out[r, q] = oracle_bilinear(fmap, u * w - 0.5, v * h - 0.5)
    return out


def run_roi_suite(n: int = 500, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    worst = {1: 0.0, 3: 0.0, 7: 0.0}
    exact = True
    for _ in range(n):
        fmap = rng.normal(size=(8, 8, 4))
        box = random_box(rng)
        t = T.Tensor(fmap)
        for c in worst:
            got = roi_align(t, box, c).data
            worst[c] = max(worst[c], float(np.max(np.abs(got - oracle_roi_align(fmap, box, c)))))
        exact &= bool(np.array_equal(roi_align(t, box, 1).data.reshape(-1), _ra1(t, box)))
    checks = [Check(f"roi:ra{c}_oracle", err < 1e-5, f"max abs error {err:.2e} over {n}") for c, err in worst.items()]
    checks.append(Check("roi:ra1_equals_raC1", exact, "bitwise"))
    return checks


def _ra1(t: T.Tensor, box) -> np.ndarray:
    from .roi import RoiMode, extract

    h, w, c = t.shape
    return extract(T.reshape(t, (1, h, w, c)), [0], np.asarray(box)[None], RoiMode("raC", 1)).data.reshape(-1)


# ---------------------------------------------------------------- losses


def run_losses_suite() -> list:
    u = T.Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    pred = float(box_prediction_loss(u, u, tau=1.0).data)
    expected_pred = math.log(1.0 + math.exp(-1.0))
    reg = float(box_regression_loss(T.Tensor(np.array([[1.0, 1.0, 2.0, 2.0]])), np.array([[2.0, 2.0, 2.0, 2.0]]),
                                    None, 2.0, 5.0).data)
    expected_reg = 2.0 * (1.0 - (1.0 / 7.0 - 2.0 / 9.0)) + 5.0 * 2.0
    groups = match_groups([(0, 0, 1, [0], [1]), (0, 1, 0, [1], [0])], 1)
    byol = float(byol_groups_loss(T.Tensor(np.array([[1.0, 0.0], [1.0, 0.0]])), np.array([[0.0, 1.0], [0.0, 1.0]]),
                                  groups).data)
    return [
        Check("losses:box_prediction_fixture", abs(pred - 0.31326) <= 1e-5, f"{pred:.6f} vs {expected_pred:.6f}"),
        Check("losses:box_regression_fixture", abs(reg - 12.15873) <= 1e-4, f"{reg:.6f} vs {expected_reg:.6f}"),
        Check("losses:byol_orthogonal_fixture", abs(byol - 4.0) <= 1e-12, f"{byol:.6f} vs 4"),
    ]


# ---------------------------------------------------------------- entry point


def run_suite(suite: str, grad_cases_override=None) -> dict:
    if suite != "all" and suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES + ('all',)}")
    started = time.perf_counter()
    checks = []
    for name in SUITES if suite == "all" else (suite,):
        if name == "grad":
            checks += run_grad_suite(grad_cases_override)
        elif name == "geometry":
            checks += run_geometry_suite()
        elif name == "roi":
            checks += run_roi_suite()
        else:
            checks += run_losses_suite()
    failures = [c.name for c in checks if not c.passed]
    return {
        "suite": suite,
        "checks": [asdict(c) for c in checks],
        "failures": failures,
        "seconds": round(time.perf_counter() - started, 3),
    }
