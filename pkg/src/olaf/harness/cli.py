"""Command line entry point: ``olaf <verb> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 2 diverged, 3 config error, 4 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..channelizer import ProviderError
from ..data import DataError, SceneSpec, generate, write_raster_dataset
from ..ldf import ConfigError as LdfConfigError
from .config import ConfigError, RunConfig, parse_override
from .experiments import NOISE_LEVELS, cmd_ablate, cmd_adapt_compare, cmd_noise_sweep
from .runner import evaluate_checkpoint, train

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG, EXIT_DATA = 0, 2, 3, 4


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = dict(parse_override(s) for s in args.set or [])
    for flag in ("epochs", "seed", "output_dir"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    return cfg.replace(**overrides).validate() if overrides else cfg.validate()


def _seeds(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.split(","))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config (YAML or JSON)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. --set model.ldf=true (repeatable)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", dest="output_dir")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="olaf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train one configuration")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("checkpoint")

    p = sub.add_parser("ablate", help="LDF / edge / fg ablation grid")
    _add_common(p)
    p.add_argument("--seeds", type=_seeds, default=(0,))
    p.add_argument("--rows", help="comma separated subset of rows")

    p = sub.add_parser("noise-sweep", help="mask-noise robustness curve")
    _add_common(p)
    p.add_argument("--levels", default=",".join(f"{v:g}" for v in NOISE_LEVELS))
    p.add_argument("--seeds", type=_seeds, default=(0,))

    p = sub.add_parser("adapt-compare", help="compare input-layer adaptation schemes")
    _add_common(p)
    p.add_argument("--seeds", type=_seeds, default=(0, 1, 2))
    p.add_argument("--n-warm", type=int, default=5)
    p.add_argument("--pretrain-epochs", type=int)

    p = sub.add_parser("generate-data", help="write a synthetic raster dataset")
    p.add_argument("output")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "generate-data":
            spec = SceneSpec(size=args.size, seed=args.seed)
            train_s, tax, manifest = generate(spec, args.n_train)
            val_s, _, val_manifest = generate(spec, args.n_val, offset=args.n_train)
            root = Path(args.output)
            write_raster_dataset(root / "train", train_s, tax, manifest)
            write_raster_dataset(root / "val", val_s, tax, val_manifest)
            tax.save(root / "taxonomy.yaml")
            print(root)
            return EXIT_OK

        cfg = _config(args)
        out = Path(cfg.output_dir)
        if args.verb == "train":
            report = train(cfg)
            print(json.dumps(report["metrics"]))
            return EXIT_DIVERGED if report["diverged"] else EXIT_OK
        if args.verb == "eval":
            report = evaluate_checkpoint(args.checkpoint, cfg, out)
            print(json.dumps(report["metrics"]))
            return EXIT_OK
        if args.verb == "ablate":
            rows = args.rows.split(",") if args.rows else None
            table = cmd_ablate(cfg, out, seeds=args.seeds, rows=rows)
            print(out / "ablation.csv")
            return EXIT_OK if table else EXIT_CONFIG
        if args.verb == "noise-sweep":
            levels = [float(v) for v in args.levels.split(",")]
            cmd_noise_sweep(cfg, out, levels=levels, seeds=args.seeds)
            print(out / "noise_sweep.csv")
            return EXIT_OK
        if args.verb == "adapt-compare":
            cmd_adapt_compare(cfg, out, seeds=args.seeds, n_warm=args.n_warm,
                              pretrain_epochs=args.pretrain_epochs)
            print(out / "adapt_compare.csv")
            return EXIT_OK
    except (ConfigError, LdfConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ProviderError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_CONFIG


def main() -> None:
    sys.exit(run())
