"""``boxcorr`` command line: train, ablate, eval, verify."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .augmentation import ConfigError
from .config import TrainConfig, apply_overrides, config_hash, load_config

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_USAGE = 2
EXIT_ABORTED = 3


def build_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def _say(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr, flush=True)


def cmd_train(args) -> int:
    from .plotting import plot_training_curves
    from .training import read_metrics, run_training

    cfg = build_config(args)
    out = Path(args.out) if args.out else Path("runs") / f"train-{config_hash(cfg)}"
    if (out / "report.json").exists():
        print(f"error: {out} holds a completed run; completed runs are never overwritten", file=sys.stderr)
        return EXIT_USAGE
    every = max(1, cfg.total_steps // 20)

    def progress(res):
        if res.step % every == 0 or res.step == cfg.total_steps:
            b = res.breakdown
            _say(args, f"step {res.step:5d}/{cfg.total_steps}  lr {res.lr:.4f}  m {res.m:.5f}  "
                       f"l_byol {b.l_byol:.4f}  total {b.total:.4f}")

    report = run_training(cfg, out, progress)
    plot_training_curves(read_metrics(out / "metrics.csv"), out / "training_curves.png")
    _say(args, f"wrote {out}")
    print(json.dumps(report["eval"], sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import parse_axis, parse_grid, run_ablation
    from .plotting import plot_ablation_summary

    base = build_config(args)
    spec: dict = {}
    if args.grid:
        spec.update(json.loads(Path(args.grid).read_text()) if Path(args.grid).is_file() else json.loads(args.grid))
    for text in args.axis or []:
        key, values = parse_axis(text)
        spec[key] = values
    points = parse_grid(spec)
    out = Path(args.out) if args.out else Path("runs") / f"ablate-{config_hash(base)}"
    rows = run_ablation(base, points, out, parallel=args.parallel, progress=lambda m: _say(args, m))
    plot_ablation_summary(rows, out / "ablation_summary.png")
    _say(args, f"wrote {out / 'summary.csv'} ({len(rows)} rows)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .networks import CheckpointError
    from .plotting import plot_eval
    from .training import embed_eval, eval_set, feature_stats, load_network, retrieval_accuracy

    try:
        net, cfg, meta = load_network(args.checkpoint)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        cfg.eval_seed = args.seed
    if args.set:
        cfg = apply_overrides(cfg, args.set).validate()
    emb, groups = embed_eval(net, eval_set(cfg), cfg.roi)
    acc, n = retrieval_accuracy(emb, groups)
    stats = {"retrieval_top1": acc, "retrieval_boxes": n, "chance": 1.0 / cfg.aug.K, **feature_stats(emb)}
    report = {
        "checkpoint": str(args.checkpoint),
        "step": meta.get("step"),
        "config_hash": meta.get("config_hash"),
        "eval_seed": cfg.eval_seed,
        "eval_images": cfg.eval_images,
        "eval": stats,
    }
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent.parent / f"eval-seed{cfg.eval_seed}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    plot_eval(emb, stats, out / "eval.png")
    _say(args, f"wrote {out / 'report.json'}")
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    report = run_suite(args.suite)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_FAILURES if report["failures"] else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boxcorr", description="Box-level view-correspondence pretraining at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_help="training seed"):
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field; repeatable")
        p.add_argument("--seed", type=int, help=seed_help)
        p.add_argument("--out", help="output directory")
        p.add_argument("--quiet", action="store_true", help="no progress on stderr")

    p = sub.add_parser("train", help="train one run")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="one run per grid point plus summary.csv")
    common(p)
    p.add_argument("--grid", help='JSON file or string, e.g. \'{"K": [4, 8]}\'')
    p.add_argument("--axis", action="append", metavar="KEY=V1,V2", help="add one grid axis; repeatable")
    p.add_argument("--parallel", type=int, default=1, help="number of concurrent run processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fixed eval set")
    p.add_argument("checkpoint")
    p.add_argument("--seed", type=int, help="eval seed (defaults to the checkpoint's)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", help="output directory for report.json and eval.png")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="invariant and oracle suites")
    p.add_argument("suite", nargs="?", default="all", choices=("grad", "geometry", "roi", "losses", "all"))
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .training import TrainingAborted

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
