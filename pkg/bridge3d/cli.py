"""Command-line entry point: ``python -m bridge3d <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import typing as t

from .config_store import RunConfig, apply_overrides, load_config
from .errors import Bridge3DError, UsageError
from .logs import setup_logging

logger = logging.getLogger("bridge3d")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bridge3d", description=__doc__)
    p.add_argument("--config", help="run configuration JSON (default: config/run_config.json)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="build the procedural asset/view dataset")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train-bridge", help="train the front-to-back bridge")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")

    s = sub.add_parser("train-3d", help="train the two-stage voxel generator")
    s.add_argument("--data", required=True)
    s.add_argument("--bridge", help="bridge checkpoint (required with injection)")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--no-inject", action="store_true", help="LoRA-only fine-tuning, no feature injection")
    s.add_argument("--sparse-only", action="store_true", help="skip the fine stage")

    s = sub.add_parser("sample", help="generate voxels from a front image and a back prompt")
    s.add_argument("--bridge", required=True)
    s.add_argument("--gen3d", required=True)
    s.add_argument("--front", required=True, help="K3IMG front view")
    s.add_argument("--prompt", default="", help='back tokens, e.g. "BACK SPIKE LARGE"; empty for view-only')
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("ablate", help="run an ablation or the controllability experiment")
    s.add_argument("experiment", choices=["timestep", "feature-source", "controllability"])
    s.add_argument("--data", required=True)
    s.add_argument("--bridge", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--plot", action="store_true")

    s = sub.add_parser("eval", help="score predictions against ground truth")
    s.add_argument("--kind", choices=["voxels", "bridge"], default="voxels")
    s.add_argument("--pred", help="directory of predicted .k3vox files")
    s.add_argument("--gt", help="directory of ground-truth .k3vox files")
    s.add_argument("--data", help="dataset (bridge evaluation)")
    s.add_argument("--bridge", help="bridge checkpoint (bridge evaluation)")
    s.add_argument("--split", default="holdout")
    s.add_argument("--limit", type=int)
    s.add_argument("--out", help="output JSON (voxels) or report directory (bridge)")

    s = sub.add_parser("gradcheck", help="run the float64 gradient-check suite")
    s.add_argument("--seed", type=int, default=0)
    return p


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    return apply_overrides(cfg, args.overrides) if args.overrides else cfg


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{n}" for n in names if not getattr(args, n)]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


def cmd_gen_data(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .data.dataset import build_dataset
    build_dataset(cfg.dataset, args.seed, args.out)
    return 0


def cmd_train_bridge(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .bridge.train import train_bridge
    from .data.dataset import Dataset
    train_bridge(Dataset(args.data), cfg, args.out)
    return 0


def cmd_train_3d(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .bridge.train import load_bridge
    from .data.dataset import Dataset
    from .fusion3d.train import build_feature_cache, train_3d
    dataset = Dataset(args.data)
    inject = cfg.gen3d.inject and not args.no_inject
    features = None
    if inject:
        _require(args, "bridge")
        bridge, _ = load_bridge(args.bridge)
        cache = os.path.join(os.path.dirname(os.path.abspath(args.out)), "features")
        features = build_feature_cache(bridge, cfg, dataset, dataset.gen3d_items(split="train"), cache)
    train_3d(dataset, cfg, args.out, inject=inject, features=features, fine_stage=not args.sparse_only)
    return 0


def cmd_sample(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .data.annotate import parse_prompt
    from .data.formats import read_image
    from .bridge.train import load_bridge
    from .fusion3d.generate import generate_with, write_generation
    from .fusion3d.train import load_generator
    prompt = parse_prompt(args.prompt)
    bridge, bridge_cfg = load_bridge(args.bridge)
    gen = load_generator(args.gen3d)
    v_ss, v_geo = generate_with(bridge, bridge_cfg, gen, read_image(args.front), prompt, args.seed)
    write_generation(args.out, v_ss, v_geo, seed=args.seed, prompt=prompt, bridge_ckpt=args.bridge,
                     gen3d_ckpt=args.gen3d, cfg=gen.cfg)
    return 0


def cmd_ablate(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .config_store import with_updates
    from .data.dataset import Dataset
    from .harness.ablations import ablate_feature_source, ablate_timestep
    from .harness.controllability import run_controllability
    if args.plot:
        cfg = with_updates(cfg, report={"plot": True})
    run = {"timestep": ablate_timestep, "feature-source": ablate_feature_source,
           "controllability": run_controllability}[args.experiment]
    run(Dataset(args.data), cfg, args.bridge, args.out)
    return 0


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.kind == "bridge":
        from .analytics.evaluator import evaluate_bridge
        from .bridge.train import load_bridge
        from .data.dataset import Dataset
        from .harness.reports import write_report
        _require(args, "data", "bridge", "out")
        model, bridge_cfg = load_bridge(args.bridge)
        rows = evaluate_bridge(model, bridge_cfg, Dataset(args.data), split=args.split,
                               seed=cfg.train.seed, limit=args.limit)
        meta = {"aggregate": {c: float(rows[c].mean()) for c in ("psnr_prompt", "psnr_view_only")}}
        write_report(args.out, "bridge_eval", rows, list(rows.columns), bridge_cfg, meta)
        logger.info("bridge eval: psnr %.3f dB with prompt, %.3f dB view-only",
                    meta["aggregate"]["psnr_prompt"], meta["aggregate"]["psnr_view_only"])
        return 0
    from .analytics.evaluator import evaluate_dirs
    _require(args, "pred", "gt")
    result = evaluate_dirs(args.pred, args.gt)
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_gradcheck(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .harness.gradsuite import run_gradcheck_suite
    rows = run_gradcheck_suite(seed=args.seed)
    print(rows.to_string(index=False))
    return 0 if bool(rows["passed"].all()) else 1


COMMANDS: dict[str, t.Callable[[argparse.Namespace, RunConfig], int]] = {
    "gen-data": cmd_gen_data,
    "train-bridge": cmd_train_bridge,
    "train-3d": cmd_train_3d,
    "sample": cmd_sample,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: t.Sequence[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    setup_logging(args.log_level.upper())
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"bridge3d: {exc}", file=sys.stderr)
        return 2
    except Bridge3DError as exc:
        print(f"bridge3d: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
