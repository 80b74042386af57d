"""One-factor-at-a-time ablation grids over a base configuration."""

from __future__ import annotations

import csv
import json
import os
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .augmentation import ConfigError
from .config import TrainConfig, apply_overrides, config_hash, dump_config, load_config
from .training import evaluate, load_network, run_training

SUMMARY_FIELDS = (
    "point", "key", "value", "run_dir", "config_hash", "retrieval_top1", "retrieval_boxes",
    "chance", "min_std", "mean_std", "mean_cos", "faults", "reused",
)


@dataclass
class GridPoint:
    key: str
    value: object
    extra: dict = field(default_factory=dict)

    @property
    def overrides(self) -> dict:
        return {**self.extra, self.key: self.value}

    def dirname(self, index: int) -> str:
        text = json.dumps(self.value) if not isinstance(self.value, str) else self.value
        safe = "".join(ch if ch.isalnum() or ch in "-." else "_" for ch in text)
        return f"{index:02d}_{self.key.replace('.', '_')}_{safe}"


def parse_grid(spec) -> list:
    """Grid points from ``{key: [values]}`` or ``{key: {"values": [...], "set": {...}}}``.

    Each axis is varied on its own around the base config, so the number of
    runs is the sum of the axis lengths.
    """
    if isinstance(spec, (str, Path)):
        text = Path(spec).read_text() if Path(str(spec)).is_file() else str(spec)
        spec = json.loads(text)
    if not isinstance(spec, dict) or not spec:
        raise ConfigError("grid", "empty grid")
    points = []
    for key, axis in spec.items():
        extra = {}
        if isinstance(axis, dict):
            extra = dict(axis.get("set", {}))
            axis = axis.get("values", [])
        if not isinstance(axis, list) or not axis:
            raise ConfigError(f"grid.{key}", "axis needs a non-empty list of values")
        points += [GridPoint(key, v, extra) for v in axis]
    return points


def parse_axis(text: str) -> tuple:
    """``K=4,8,16`` -> ("K", [4, 8, 16])."""
    from .config import parse_value

    if "=" not in text:
        raise ConfigError(text, "axis must look like key=v1,v2,...")
    key, values = text.split("=", 1)
    return key.strip(), [parse_value(v.strip()) for v in values.split(",") if v.strip()]


def _completed(run_dir: Path, cfg: TrainConfig) -> bool:
    ckpt = run_dir / "checkpoints" / "final.ckpt"
    cfg_path = run_dir / "config.json"
    if not (ckpt.exists() and cfg_path.exists()):
        return False
    return config_hash(load_config(cfg_path)) == config_hash(cfg)


def _summary_row(index: int, point: GridPoint, run_dir: Path, cfg: TrainConfig, reused: bool) -> dict:
    report_path = run_dir / "report.json"
    if report_path.exists():
        report = json.loads(report_path.read_text())
    else:
        net, _, _ = load_network(run_dir / "checkpoints" / "final.ckpt", cfg)
        report = {"eval": evaluate(net, cfg), "faults": 0}
    ev = report["eval"]
    return {
        "point": index,
        "key": point.key,
        "value": json.dumps(point.value) if not isinstance(point.value, str) else point.value,
        "run_dir": run_dir.name,
        "config_hash": config_hash(cfg),
        "retrieval_top1": repr(ev["retrieval_top1"]),
        "retrieval_boxes": ev["retrieval_boxes"],
        "chance": repr(ev["chance"]),
        "min_std": repr(ev["min_std"]),
        "mean_std": repr(ev["mean_std"]),
        "mean_cos": repr(ev["mean_cos"]),
        "faults": report.get("faults", 0),
        "reused": int(reused),
    }


def run_ablation(base: TrainConfig, points: list, out_dir, parallel: int = 1, progress=None) -> list:
    """Train every grid point not already complete, then write summary.csv; returns its rows."""
    if not points:
        raise ConfigError("grid", "empty grid")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = []
    for i, point in enumerate(points):
        cfg = apply_overrides(base, point.overrides).validate()
        run_dir = out / point.dirname(i)
        plan.append((i, point, cfg, run_dir, _completed(run_dir, cfg)))
    todo = [p for p in plan if not p[4]]
    if parallel > 1 and len(todo) > 1:
        _run_processes(todo, parallel)
    else:
        for i, point, cfg, run_dir, _ in todo:
            if progress is not None:
                progress(f"[{i + 1}/{len(plan)}] {point.key}={point.value} -> {run_dir}")
            run_training(cfg, run_dir)
    rows = [_summary_row(i, point, run_dir, cfg, reused) for i, point, cfg, run_dir, reused in plan]
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def _run_processes(todo: list, parallel: int) -> None:
    """Independent ``boxcorr train`` processes; no state is shared between runs."""
    running: list = []
    failed = []
    queue = list(todo)
    while queue or running:
        while queue and len(running) < parallel:
            i, point, cfg, run_dir, _ = queue.pop(0)
            cfg_path = run_dir.parent / f".{run_dir.name}.config.json"
            dump_config(cfg, cfg_path)
            cmd = [sys.executable, "-m", "boxcorr.cli", "train", "--config", str(cfg_path), "--out", str(run_dir),
                   "--quiet"]
            running.append((point, subprocess.Popen(cmd, env=dict(os.environ))))
        point, proc = running.pop(0)
        if proc.wait() != 0:
            failed.append(f"{point.key}={point.value}")
    if failed:
        raise RuntimeError(f"ablation runs failed: {', '.join(failed)}")
