"""Command line: ``pidjudge <subcommand>``.

Exit codes: 0 success, 1 partial run (failed tiles/claims, or a strict-mode
abort), 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .assessor import StrictModeError
from .corruption import CorruptionError
from .model import DatasetError, load_dataset
from .pipeline import ConfigError, Run, RunConfig, config_from_dict, estimate_budget, load_config, run_pipeline
from .report import FORMATS, emit_report
from .synthetic import DEFAULT_HEIGHT, DEFAULT_WIDTH, make_dataset

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run config; flags below override it")
    p.add_argument("--dataset", type=Path, help="canonical dataset JSON")
    p.add_argument("--out", type=Path, help="run output directory")
    p.add_argument("--spec", type=Path, help="corruption spec JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", help="grounding mode (VisualOnly, VisualPlusTags, VisualPlusCoords, "
                                  "VisualTagsCoords, ErasedObjects)")
    p.add_argument("--tile-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--judge-backend", choices=("http", "mock-perfect", "mock-noisy"))
    p.add_argument("--judge-model")
    p.add_argument("--judge-endpoint")
    p.add_argument("--detector-backend", choices=("http", "mock-perfect", "mock-noisy"))
    p.add_argument("--detector-model")
    p.add_argument("--detector-endpoint")
    p.add_argument("--claim-detect-prob", type=float)
    p.add_argument("--spurious-rate", type=float)
    p.add_argument("--threads", type=int, help="worker threads (does not change results)")
    p.add_argument("--strict", action="store_true", default=None, help="abort on the first backend failure")
    p.add_argument("--save-prompts", action="store_true", default=None, help="write tile prompt images as PNG")
    p.add_argument("--no-figures", dest="figures", action="store_false", default=None)


def _overrides(args: argparse.Namespace) -> dict:
    o: dict = {}
    simple = {"dataset": "dataset", "out": "out", "spec": "corruption", "seed": "seed", "mode": "grounding_mode",
              "tile_size": "tile_size", "stride": "stride", "threads": "threads", "strict": "strict",
              "save_prompts": "save_prompts", "figures": "figures"}
    for attr, key in simple.items():
        v = getattr(args, attr, None)
        if v is not None:
            o[key] = str(v.resolve()) if isinstance(v, Path) else v
    for role in ("judge", "detector"):
        sub = {}
        for field in ("backend", "model", "endpoint"):
            v = getattr(args, f"{role}_{field}", None)
            if v is not None:
                sub[{"model": "model_name", "endpoint": "endpoint_url"}.get(field, field)] = v
        if role == "judge":
            noise = {}
            if getattr(args, "claim_detect_prob", None) is not None:
                noise["claim_detect_prob"] = args.claim_detect_prob
            if getattr(args, "spurious_rate", None) is not None:
                noise["spurious_claim_rate"] = args.spurious_rate
            if noise:
                sub["noise"] = noise
        if sub:
            o[role] = sub
    return o


def _config(args: argparse.Namespace) -> RunConfig:
    overrides = _overrides(args)
    if args.config is not None:
        return load_config(args.config, overrides)
    return config_from_dict(overrides, Path.cwd())


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_synth(args) -> int:
    ds = make_dataset(args.diagrams, seed=args.seed, out_dir=args.out, n_symbols=args.symbols,
                      width=args.width, height=args.height, render=not args.no_images)
    _print({"dataset": str(args.out / "dataset.json"), "diagrams": len(ds.diagrams),
            "symbols": sum(len(d.symbols) for d in ds.diagrams)})
    return EXIT_OK


def _stage(args, name: str) -> int:
    cfg = _config(args)
    run = Run(cfg)
    run.out.mkdir(parents=True, exist_ok=True)
    if name == "inject":
        summary = run.inject()
    elif name == "assess":
        summary = run.assess(resume=args.resume)
    elif name == "refine":
        summary = run.refine()
    else:
        summary = run.evaluate()
    run.write_manifest({name: summary})
    _print(summary)
    partial = summary.get("tiles_failed") or summary.get("failed_claims")
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    status = run_pipeline(cfg)
    scores = json.loads((Path(cfg.out_dir) / "scores.json").read_text(encoding="utf-8"))
    _print({"judge": scores.get("judge"), "comparison": scores.get("comparison"), "exit": status})
    return status


def cmd_report(args) -> int:
    ext = {"csv": "csv", "json": "json", "markdown": "md"}
    if args.format == "all":
        out_dir = args.output if args.output is not None else args.runs[0]
        targets = [(fmt, out_dir / f"report.{ext[fmt]}") for fmt in FORMATS]
    else:
        output = args.output if args.output is not None else args.runs[0] / f"report.{ext[args.format]}"
        targets = [(args.format, output)]
    for fmt, output in targets:
        print(emit_report(args.runs, fmt, output, figures=args.figures))
    return EXIT_OK


def cmd_budget(args) -> int:
    cfg = _config(args)
    if cfg.dataset_path is None:
        raise ConfigError("estimate-budget needs --dataset")
    dataset = load_dataset(cfg.dataset_path, validate=True)
    _print(estimate_budget(dataset, cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pidjudge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic P&ID-like dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--diagrams", type=int, default=10)
    p.add_argument("--symbols", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=DEFAULT_WIDTH)
    p.add_argument("--height", type=int, default=DEFAULT_HEIGHT)
    p.add_argument("--no-images", action="store_true", help="annotations only (enough for estimate-budget)")
    p.set_defaults(func=cmd_synth)

    for name, help_ in (
        ("inject", "corrupt ground truth into detections + injection logs"),
        ("assess", "run box QA and the tile-wise missing-object judge"),
        ("refine", "recover claimed objects, relocalize loose boxes, merge"),
        ("evaluate", "score the judge and mAP before/after correction"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        if name == "assess":
            p.add_argument("--resume", action="store_true", help="re-run only failed tiles of earlier reports")
        p.set_defaults(func=lambda a, n=name: _stage(a, n))

    p = sub.add_parser("run", help="inject, assess, refine, evaluate and report in one go")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="tabulate run directories (CSV/JSON/Markdown + figures)")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--format", choices=FORMATS + ("all",), default="csv")
    p.add_argument("--output", type=Path, help="output file (or directory when --format all)")
    p.add_argument("--no-figures", dest="figures", action="store_false")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("estimate-budget", help="estimate judge input tokens for one pass")
    _add_common(p)
    p.set_defaults(func=cmd_budget)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CorruptionError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StrictModeError as exc:
        print(f"aborted (strict): {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
