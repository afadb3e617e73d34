"""Command-line entry point: ``pyramid-pose {train,infer,eval,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, RunConfig


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--checkpoint", type=Path, help="checkpoint to write (train) or read")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--icp", choices=("on", "off"), help="refine poses with ICP when depth is available")
    common.add_argument("--aggregation", choices=("pfpn", "fpn", "none"), help="feature aggregation mode")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pyramid-pose", description="Single-shot 6D object pose estimation.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a network and write a checkpoint")
    sub.add_parser("infer", parents=[common], help="detect objects and estimate poses")
    sub.add_parser("eval", parents=[common], help="infer, then report ADD(-S) recall and a BOP result file")
    sub.add_parser("selftest", parents=[common], help="run built-in gradient, oracle and geometry checks")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.aggregation:
        cfg.model.pyramid.mode = args.aggregation
    if args.icp:
        cfg.infer.use_icp = args.icp == "on"
    if args.out:
        cfg.out_dir = str(args.out)
    if args.checkpoint:
        cfg.checkpoint = str(args.checkpoint)
    return cfg


def cmd_train(cfg: RunConfig) -> int:
    from .train import train

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    result = train(cfg, log_path=out / "train_log.jsonl")
    summary = {"steps": result.steps, "final_loss": result.final_loss, "seconds": result.seconds,
               "checkpoint": cfg.checkpoint}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return 0


def _load(cfg: RunConfig):
    from .train import load_dataset, load_network

    net, _ = load_network(cfg.checkpoint, cfg)
    samples, meshes = load_dataset(cfg)
    return net, samples, meshes


def cmd_infer(cfg: RunConfig) -> int:
    from .infer import detect

    net, samples, meshes = _load(cfg)
    records = detect(net, samples, meshes, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"scene_id": r.scene_id, "image_id": r.image_id, "class_id": r.class_id, "score": r.score,
             "R": r.pose.R.tolist(), "t": r.pose.t.tolist(),
             "refined_R": None if r.refined_pose is None else r.refined_pose.R.tolist(),
             "refined_t": None if r.refined_pose is None else r.refined_pose.t.tolist(),
             "num_anchors": r.num_anchors, "num_inliers": r.num_inliers, "time_ms": r.time_ms}
            for r in records]
    (out / "detections.json").write_text(json.dumps(rows, indent=1))
    print(f"{len(records)} detections in {len(samples)} images -> {out / 'detections.json'}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    from .evaluation import run_eval

    net, samples, meshes = _load(cfg)
    report, _ = run_eval(net, samples, meshes, cfg, out_dir=cfg.out_dir)
    print(report.to_text({cid: m.name for cid, m in meshes.items()}), end="")
    return 0


def cmd_selftest(cfg: RunConfig) -> int:
    from .selftest import format_results, run_selftest

    results = run_selftest()
    print(format_results(results))
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "selftest": cmd_selftest}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, OSError, ValueError) as e:
        print(f"pyramid-pose {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
