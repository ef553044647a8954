"""Command-line interface.

Subcommands: make-dataset, train, eval, infer, ablate, bench, gradcheck.
Exit codes: 0 success, 2 validation failure (bad config or input files),
1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import RunConfig, ValidationError
from .data import data_root, load_manifest, make_dataset
from .language import ConlluError


def _add_common(parser, data=True):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", default="out", help="output directory")
    if data:
        parser.add_argument("--data", help="dataset root "
                            "(default: $STMN_DATA_DIR or ./data)")


def _load_config(args):
    config = RunConfig.load(args.config) if args.config else RunConfig.toy()
    if getattr(args, "seed", None) is not None:
        config = config.replace(seed=args.seed)
    return config


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stmn",
        description="Superpoint-text matching for referring expression "
                    "segmentation on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="generate scenes and expressions")
    _add_common(p)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--workers", type=int, default=1,
                   help="evaluation worker threads")

    p = sub.add_parser("infer", help="run one scene + expression")
    _add_common(p, data=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--expr", required=True,
                   help="expression record JSON file")

    p = sub.add_parser("ablate", help="train/evaluate a config grid")
    _add_common(p)
    p.add_argument("--axis", default="structure",
                   help="named axis (kernel, structure, direction, sampling) "
                        "or a JSON grid file")

    p = sub.add_parser("bench", help="latency harness")
    _add_common(p, data=False)
    p.add_argument("--n", type=int, default=120,
                   help="inferences per mode (>= 100 for reports)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_common(p, data=False)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (ValidationError, ConlluError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args):
    import os

    from . import engine

    if args.command == "make-dataset":
        config = _load_config(args)
        root = data_root(args.data)
        manifest = make_dataset(config, root)
        print(json.dumps({"root": root,
                          "train": len(manifest["train"]),
                          "val": len(manifest["val"])}))
        return 0

    if args.command == "train":
        config = _load_config(args)
        root = data_root(args.data)
        model, log_rows = engine.train(config, root, args.out,
                                       resume=args.resume)
        print(json.dumps({"epochs": len(log_rows),
                          "final_loss": log_rows[-1]["loss"] if log_rows else None,
                          "checkpoint": os.path.join(args.out, "last.ckpt")}))
        return 0

    if args.command == "eval":
        config_override = RunConfig.load(args.config) if args.config else None
        model, _ = engine.load_model(args.checkpoint)
        root = data_root(args.data)
        report, _ = engine.evaluate(model, root, split=args.split,
                                    workers=args.workers, out_dir=args.out,
                                    config=config_override or model.config)
        print(json.dumps(report, sort_keys=True))
        return 0

    if args.command == "infer":
        model, _ = engine.load_model(args.checkpoint)
        with open(args.expr, encoding="utf-8") as fh:
            text = fh.read().strip()
        record = json.loads(text.splitlines()[0])
        result = engine.infer(model, args.scene, record)
        os.makedirs(args.out, exist_ok=True)
        out_path = os.path.join(args.out, "inference.json")
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(result, fh, sort_keys=True)
        print(json.dumps({k: v for k, v in result.items()
                          if k not in ("superpoint_mask", "point_mask")},
                         sort_keys=True))
        return 0

    if args.command == "ablate":
        config = _load_config(args)
        root = data_root(args.data)
        axis = args.axis
        if axis.endswith(".json"):
            with open(axis, encoding="utf-8") as fh:
                grid = [(row["name"], row["delta"]) for row in json.load(fh)]
            rows = engine.ablate(config, root, grid, args.out)
        else:
            rows = engine.ablate(config, root, axis, args.out)
        print(json.dumps(rows))
        return 0

    if args.command == "bench":
        config = _load_config(args)
        result = engine.bench(config, out_dir=args.out, n_inferences=args.n)
        print(json.dumps(result, sort_keys=True))
        return 0

    if args.command == "gradcheck":
        config = _load_config(args)
        os.makedirs(args.out, exist_ok=True)
        results = engine.gradcheck(
            out_path=os.path.join(args.out, "gradcheck.json"))
        return 0 if results["pass"] else 1

    raise ValidationError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
