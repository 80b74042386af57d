"""EMA target updates, optimizers, schedules, the training loop and probes."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import tensor as T
from .augmentation import ViewSet, build_viewset
from .config import TrainConfig, config_hash, dump_config, to_dict
from .geometry import xyxy_to_cxcywh
from .losses import (
    LossBreakdown,
    PairGroups,
    box_prediction_groups_loss,
    box_regression_loss,
    byol_groups_loss,
    match_groups,
    total_loss,
)
from .networks import NetworkPair, load_checkpoint, save_checkpoint
from .roi import RoiMode, extract, shared_grid_boxes
from .synth import EVAL, TRAIN, item_rng, render_scene
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "lr", "m", "l_byol", "l_box_pred", "l_box_reg", "total", "pair_count", "wall_ms")
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25
WHOLE_VIEW = np.array([0.0, 0.0, 1.0, 1.0])


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------- schedules


def cosine_lr(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear warmup to ``peak`` over ``warmup_steps``, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def ema_momentum(step: int, total_steps: int, base: float) -> float:
    """Cosine ramp from ``base`` at step 0 to 1 at ``total_steps``."""
    progress = min(max(step / max(total_steps, 1), 0.0), 1.0)
    return 1.0 - (1.0 - base) * (math.cos(math.pi * progress) + 1.0) / 2.0


# ---------------------------------------------------------------- EMA


def ema_update(online: dict, target: dict, m: float) -> dict:
    """``target <- m * target + (1 - m) * online`` for every target entry.

    Both mappings hold arrays (or tensors); the target is updated in place.
    Returns per-parameter ``(|step|, (1 - m) * |online - target_old|, slack)``
    where ``slack`` bounds float64 rounding in the update itself.
    """
    if not set(target) <= set(online):
        raise KeyError(f"target parameters missing from online registry: {sorted(set(target) - set(online))}")
    audit = {}
    for name, tgt in target.items():
        src = online[name]
        src = src.data if isinstance(src, Tensor) else src
        old = tgt.data if isinstance(tgt, Tensor) else tgt
        if src.shape != old.shape:
            raise ValueError(f"{name}: online shape {src.shape} != target shape {old.shape}")
        gap = src.astype(np.float64) - old
        new = m * old + (1.0 - m) * src.astype(np.float64)
        slack = 8 * np.finfo(np.float64).eps * (np.linalg.norm(old) + np.linalg.norm(src))
        audit[name] = (float(np.linalg.norm(new - old)), float((1.0 - m) * np.linalg.norm(gap)), float(slack))
        if isinstance(tgt, Tensor):
            tgt.data = new.astype(tgt.dtype)
        else:
            tgt[...] = new
    return audit


# ---------------------------------------------------------------- optimizers


def _excluded(name: str, value: np.ndarray) -> bool:
    return value.ndim <= 1


def _check_grads(op: str, grads: dict) -> None:
    # validate everything first so a bad gradient never leaves a half-applied update
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"{op}: non-finite gradient for {name}")


def lars_step(params: dict, grads: dict, lr: float, weight_decay: float = 0.0, eta: float = 0.001,
              eps: float = 1e-8, momentum: float = 0.0, buffers: dict | None = None) -> None:
    """One LARS update in place; 1-D parameters skip adaptation and weight decay."""
    _check_grads("lars_step", grads)
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        data = w.data if isinstance(w, Tensor) else w
        if _excluded(name, data):
            update = g.astype(np.float64)
        else:
            d = g.astype(np.float64) + weight_decay * data
            w_norm, d_norm = np.linalg.norm(data), np.linalg.norm(d)
            trust = eta * w_norm / (d_norm + eps) if w_norm > 0 and d_norm > 0 else 1.0
            update = trust * d
        if momentum and buffers is not None:
            buf = buffers.get(name)
            buf = update if buf is None else momentum * buf + update
            buffers[name] = buf
            update = buf
        data -= (lr * update).astype(data.dtype)


def sgd_step(params: dict, grads: dict, lr: float, weight_decay: float = 0.0,
             momentum: float = 0.0, buffers: dict | None = None) -> None:
    _check_grads("sgd_step", grads)
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        data = w.data if isinstance(w, Tensor) else w
        update = g.astype(np.float64)
        if not _excluded(name, data):
            update = update + weight_decay * data
        if momentum and buffers is not None:
            buf = buffers.get(name)
            buf = update if buf is None else momentum * buf + update
            buffers[name] = buf
            update = buf
        data -= (lr * update).astype(data.dtype)


class Optimizer:
    def __init__(self, kind: str, momentum: float, weight_decay: float, eta: float = 0.001):
        self.kind = kind
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.eta = eta
        self.buffers: dict = {}

    def step(self, params: dict, lr: float) -> None:
        grads = {k: v.grad for k, v in params.items() if v.grad is not None}
        if self.kind == "lars":
            lars_step(params, grads, lr, self.weight_decay, self.eta, momentum=self.momentum, buffers=self.buffers)
        else:
            sgd_step(params, grads, lr, self.weight_decay, self.momentum, self.buffers)


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    return Optimizer(cfg.optimizer, cfg.momentum, cfg.weight_decay, cfg.lars_eta)


def make_network(cfg: TrainConfig) -> NetworkPair:
    dim = cfg.roi.feature_dim(cfg.net.out_channels)
    return NetworkPair(cfg.net, dim, seed=cfg.seed, decoder=cfg.loss.aux_mode == "regression")


# ---------------------------------------------------------------- data


def data_workers() -> int:
    try:
        cap = int(os.environ.get("BOXCORR_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, os.cpu_count() or 1))


def make_viewset(cfg: TrainConfig, split: int, index: int) -> ViewSet:
    if split == TRAIN:
        scene_seed, aug_seed = cfg.synth.seed, cfg.seed
    else:
        scene_seed = aug_seed = cfg.eval_seed
    image, _ = render_scene(cfg.synth, item_rng(scene_seed, split, index, stream=0))
    return build_viewset(image, cfg.aug, item_rng(aug_seed, split, index, stream=1))


def make_batch(cfg: TrainConfig, split: int, indices) -> list:
    indices = list(indices)
    workers = data_workers()
    if workers == 1:
        return [make_viewset(cfg, split, i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: make_viewset(cfg, split, i), indices))


def train_batch(cfg: TrainConfig, step: int) -> list:
    """Training view sets for 1-based ``step``; always drawn from the training split."""
    start = (step - 1) * cfg.batch_size
    return make_batch(cfg, TRAIN, range(start, start + cfg.batch_size))


def eval_set(cfg: TrainConfig) -> list:
    return make_batch(cfg, EVAL, range(cfg.eval_images))


def _normalize_pixels(images) -> np.ndarray:
    return ((np.stack(images) - PIXEL_MEAN) / PIXEL_STD).astype(np.float32)


# ---------------------------------------------------------------- batch layout


@dataclass
class BatchLayout:
    """Rows of the box-feature tables and the view pairs that match them."""

    view_images: np.ndarray
    local_images: np.ndarray | None
    global_map: np.ndarray
    global_boxes: np.ndarray
    local_map: np.ndarray
    groups: PairGroups
    n_images: int
    V: int
    reg_rows: list = field(default_factory=list)

    @property
    def n_global(self) -> int:
        return len(self.global_map)


def layout_batch(viewsets: list, roi: RoiMode) -> BatchLayout | None:
    """Arrange view sets into feature rows; degenerate view sets are dropped."""
    if roi.kind != "shared_grid":
        viewsets = [vs for vs in viewsets if not vs.degenerate]
    if not viewsets:
        return None
    V = viewsets[0].V
    gmap, gboxes, lmap, local_imgs, matches, reg_rows = [], [], [], [], [], []

    def add_row(map_index, box):
        gmap.append(map_index)
        gboxes.append(box)
        return len(gmap) - 1

    if roi.kind == "shared_grid":
        for n, vs in enumerate(viewsets):
            for i, j in combinations(range(V), 2):
                bi, bj = shared_grid_boxes(vs.transforms[i], vs.transforms[j], roi.c)
                ri = [add_row(n * V + i, b) for b in bi]
                rj = [add_row(n * V + j, b) for b in bj]
                matches.append((n, i, j, ri, rj))
                matches.append((n, j, i, rj, ri))
                reg_rows.append((n, i, j, ri, rj, bi))
                reg_rows.append((n, j, i, rj, ri, bj))
    else:
        row_of = {}
        for n, vs in enumerate(viewsets):
            for i in range(V):
                for k in vs.valid_sets[i]:
                    row_of[(n, i, k)] = add_row(n * V + i, vs.boxes_per_view[i][k])
        n_global = len(gmap)
        for n, vs in enumerate(viewsets):
            for k in vs.local_index:
                row_of[(n, V, k)] = n_global + len(lmap)
                lmap.append(len(local_imgs))
                local_imgs.append(vs.local_images[k])
        for n, vs in enumerate(viewsets):
            sets = list(vs.valid_sets) + ([list(vs.local_index)] if vs.local_index else [])
            for i in range(len(sets)):
                for j in range(len(sets)):
                    if i == j:
                        continue
                    common = sorted(set(sets[i]) & set(sets[j]))
                    src = [row_of[(n, i, k)] for k in common]
                    dst = [row_of[(n, j, k)] for k in common]
                    matches.append((n, i, j, src, dst))
                    if i < V and j < V and common:
                        boxes = np.array([vs.boxes_per_view[i][k] for k in common])
                        reg_rows.append((n, i, j, src, dst, boxes))
    groups = match_groups(matches, len(viewsets))
    return BatchLayout(
        view_images=_normalize_pixels([img for vs in viewsets for img in vs.images]),
        local_images=_normalize_pixels(local_imgs) if local_imgs else None,
        global_map=np.array(gmap, dtype=np.intp),
        global_boxes=np.array(gboxes, dtype=np.float64).reshape(-1, 4),
        local_map=np.array(lmap, dtype=np.intp),
        groups=groups,
        n_images=len(viewsets),
        V=V,
        reg_rows=reg_rows,
    )


def box_features(net: NetworkPair, layout: BatchLayout, roi: RoiMode, which: str):
    """Backbone maps and the (rows, D) box-feature table for one network."""
    fmaps = net.backbone(layout.view_images, which)
    feats = extract(fmaps, layout.global_map, layout.global_boxes, roi)
    if layout.local_images is not None:
        lmaps = net.backbone(layout.local_images, which)
        whole = np.broadcast_to(WHOLE_VIEW, (len(layout.local_map), 4))
        feats = T.concat([feats, extract(lmaps, layout.local_map, whole, roi)], axis=0)
    return fmaps, feats


def _audit_shapes(net: NetworkPair, layout: BatchLayout, fmaps: Tensor, emb: Tensor, size: int) -> None:
    side = size // net.cfg.total_stride
    want = (layout.n_images * layout.V, side, side, net.cfg.out_channels)
    if fmaps.shape != want:
        raise AssertionError(f"feature map shape {fmaps.shape} != {want}")
    if emb.ndim != 2 or emb.shape[1] != net.cfg.embed_dim:
        raise AssertionError(f"embedding shape {emb.shape} has wrong width")


def regression_terms(net: NetworkPair, fmaps: Tensor, u: Tensor, layout: BatchLayout, cfg: TrainConfig) -> Tensor:
    """Decoder predicts box ``k`` in view ``i`` from ``u_j^k``; weights follow the pair sums."""
    if not layout.reg_rows:
        return Tensor(np.zeros((), dtype=np.float32))
    pairs_per_image = np.bincount([r[0] for r in layout.reg_rows], minlength=layout.n_images)
    map_index, query_rows, truth, weights = [], [], [], []
    for n, i, _, _, dst, boxes in layout.reg_rows:
        count = len(dst)
        map_index += [n * layout.V + i] * count
        query_rows += list(dst)
        truth.append(xyxy_to_cxcywh(boxes))
        # each ordered pair carries both directions, which is twice one direction
        weights += [2.0 / (count * pairs_per_image[n] * layout.n_images)] * count
    pred = net.decode(fmaps, np.array(map_index), u[np.array(query_rows)])
    if pred.shape != (len(query_rows), 4):
        raise AssertionError(f"decoder output shape {pred.shape}")
    return box_regression_loss(pred, np.concatenate(truth), np.array(weights),
                               cfg.loss.lambda_giou, cfg.loss.lambda_box)


def forward_losses(net: NetworkPair, layout: BatchLayout, cfg: TrainConfig):
    """Online/target forward and the combined objective for one batch."""
    fmaps, feats = box_features(net, layout, cfg.roi, "online")
    _, feats_t = box_features(net, layout, cfg.roi, "target")
    u = net.project(feats, "online")
    p = net.predict(u)
    z = net.project(feats_t, "target")
    _audit_shapes(net, layout, fmaps, p, cfg.aug.view_size)
    if z.requires_grad:
        raise AssertionError("target embeddings are attached to the graph")
    groups = layout.groups
    l_byol = byol_groups_loss(p, z.data, groups, cfg.loss.normalize_features)
    l_pred = l_reg = None
    if cfg.loss.aux_mode == "prediction":
        l_pred = box_prediction_groups_loss(u, u, groups, cfg.loss.tau)
    elif cfg.loss.aux_mode == "regression":
        l_reg = regression_terms(net, fmaps, u, layout, cfg)
    return total_loss(l_byol, cfg.loss, l_pred, l_reg, groups.pair_count)


# ---------------------------------------------------------------- train step


@dataclass
class StepResult:
    step: int
    lr: float
    m: float
    breakdown: LossBreakdown | None
    skipped: bool = False
    fault: str | None = None
    ema_ratio: float = 0.0
    wall_ms: float = 0.0


def train_step(net: NetworkPair, opt: Optimizer, viewsets: list, cfg: TrainConfig, step: int) -> StepResult:
    """Forward, backward, optimizer update of online weights and EMA of the target."""
    t0 = time.perf_counter()
    lr = cosine_lr(step, cfg.total_steps, cfg.warmup_steps, cfg.peak_lr)
    m = ema_momentum(step, cfg.total_steps, cfg.ema_momentum)
    layout = layout_batch(viewsets, cfg.roi)
    if layout is None or layout.groups.pair_count == 0:
        log.warning("step %d: no usable view sets, skipping", step)
        return StepResult(step, lr, m, None, skipped=True)
    net.zero_grad()
    try:
        total, breakdown = forward_losses(net, layout, cfg)
        T.backward(total)
        for name, tgt in net.target.items():
            if tgt.grad is not None:
                raise AssertionError(f"target parameter {name} received a gradient")
        opt.step(net.online, lr)
    except NonFiniteError as exc:
        log.error("step %d: %s", step, exc)
        return StepResult(step, lr, m, None, skipped=True, fault=str(exc))
    audit = ema_update(net.online, net.target_master, m)
    net.refresh_target()
    for name, (lhs, rhs, slack) in audit.items():
        if lhs > rhs + slack:
            raise AssertionError(f"EMA contraction violated at step {step} for {name}: {lhs} > {rhs} + {slack}")
    ratio = max((a / b if b > 0 else (0.0 if a == 0 else math.inf)) for a, b, _ in audit.values())
    return StepResult(step, lr, m, breakdown, ema_ratio=ratio, wall_ms=(time.perf_counter() - t0) * 1e3)


# ---------------------------------------------------------------- probes


def embed_eval(net: NetworkPair, viewsets: list, roi: RoiMode, chunk: int = 32):
    """Target-projector embeddings for every matched box, plus their pair groups."""
    all_emb, matches, offset, n_img = [], [], 0, 0
    for start in range(0, len(viewsets), chunk):
        layout = layout_batch(viewsets[start : start + chunk], roi)
        if layout is None:
            continue
        _, feats = box_features(net, layout, roi, "target")
        all_emb.append(net.project(feats, "target").data)
        g = layout.groups
        for row, (n, i, j) in enumerate(g.pairs):
            keep = g.mask[row]
            matches.append((n_img + n, i, j, list(g.src[row][keep] + offset), list(g.dst[row][keep] + offset)))
        offset += len(feats)
        n_img += layout.n_images
    emb = np.concatenate(all_emb) if all_emb else np.zeros((0, net.cfg.embed_dim), dtype=np.float32)
    return emb, match_groups(matches, n_img)


def retrieval_accuracy(emb: np.ndarray, groups: PairGroups) -> tuple[float, int]:
    """Top-1 rate at which each box's counterpart is its most similar candidate."""
    e = emb.astype(np.float64)
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
    correct = total = 0
    for row in range(len(groups.src)):
        keep = groups.mask[row]
        a = e[groups.src[row][keep]]
        b = e[groups.dst[row][keep]]
        sims = a @ b.T
        correct += int(np.sum(np.argmax(sims, axis=1) == np.arange(len(a))))
        total += len(a)
    return (correct / total if total else 0.0), total


def eval_retrieval(net: NetworkPair, viewsets: list, roi: RoiMode) -> float:
    emb, groups = embed_eval(net, viewsets, roi)
    return retrieval_accuracy(emb, groups)[0]


def feature_stats(embeddings: np.ndarray) -> dict:
    """Collapse diagnostics on l2-normalized embeddings."""
    e = np.asarray(embeddings, dtype=np.float64)
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
    std = e.std(axis=0)
    n = len(e)
    if n > 1:
        gram = e @ e.T
        mean_cos = float((gram.sum() - np.trace(gram)) / (n * (n - 1)))
    else:
        mean_cos = 1.0
    return {"min_std": float(std.min()), "mean_std": float(std.mean()), "mean_cos": mean_cos}


def evaluate(net: NetworkPair, cfg: TrainConfig) -> dict:
    emb, groups = embed_eval(net, eval_set(cfg), cfg.roi)
    acc, n = retrieval_accuracy(emb, groups)
    return {"retrieval_top1": acc, "retrieval_boxes": n, "chance": 1.0 / cfg.aug.K, **feature_stats(emb)}


# ---------------------------------------------------------------- run loop


def checkpoint_meta(cfg: TrainConfig, step: int) -> dict:
    return {"step": step, "config": to_dict(cfg), "config_hash": config_hash(cfg)}


def load_network(path, cfg: TrainConfig | None = None) -> tuple[NetworkPair, TrainConfig, dict]:
    from .config import from_dict

    arrays, meta = load_checkpoint(path)
    if cfg is None:
        cfg = from_dict(meta["config"])
    net = make_network(cfg)
    net.load_registry(arrays)
    return net, cfg, meta


def run_training(cfg: TrainConfig, out_dir, progress=None) -> dict:
    """Train from scratch, writing config.json, metrics.csv, checkpoints/ and report.json."""
    cfg.validate()
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")
    net = make_network(cfg)
    opt = make_optimizer(cfg)
    faults = consecutive = skipped = 0
    max_ratio = 0.0
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for step in range(1, cfg.total_steps + 1):
            res = train_step(net, opt, train_batch(cfg, step), cfg, step)
            if res.fault:
                faults += 1
                consecutive += 1
                if consecutive >= 3:
                    raise TrainingAborted(f"aborting after 3 consecutive faults (last: {res.fault})")
                continue
            consecutive = 0
            if res.breakdown is None:
                skipped += 1
                continue
            max_ratio = max(max_ratio, res.ema_ratio)
            b = res.breakdown
            wall = f"{res.wall_ms:.1f}" if cfg.log_wall_ms else "0"
            writer.writerow([step, repr(res.lr), repr(res.m), repr(b.l_byol), repr(b.l_box_pred),
                             repr(b.l_box_reg), repr(b.total), b.pair_count, wall])
            if progress is not None:
                progress(res)
            if cfg.ckpt_every and step % cfg.ckpt_every == 0 and step != cfg.total_steps:
                save_checkpoint(out / "checkpoints" / f"step_{step:06d}.ckpt", net.registry(), checkpoint_meta(cfg, step))
    save_checkpoint(out / "checkpoints" / "final.ckpt", net.registry(), checkpoint_meta(cfg, cfg.total_steps))
    report = {
        "config_hash": config_hash(cfg),
        "steps": cfg.total_steps,
        "faults": faults,
        "skipped_steps": skipped,
        "max_ema_ratio": max_ratio,
        "eval": evaluate(net, cfg),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def read_metrics(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in METRIC_FIELDS} if rows else {k: np.array([]) for k in METRIC_FIELDS}


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    if len(x) < window:
        return np.array([])
    c = np.cumsum(np.insert(np.asarray(x, dtype=np.float64), 0, 0.0))
    return (c[window:] - c[:-window]) / window

