"""Command line: ``python -m reflab <command> [--seed S] [--config C] [--out DIR]``.

Exit status is 0 on success, 2 on a usage error and 1 when the command
itself fails (bad input file, generation failure, divergence, ...).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import io, pipeline
from .config import ExperimentConfig, load_config, resolve_seed
from .manifest import read_manifest, verify_outputs, write_manifest

log = logging.getLogger("reflab")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; their defaults are suppressed so a
    # flag given before the subcommand is not overwritten
    def d(value):
        return argparse.SUPPRESS if suppress else value

    p = _Parser(add_help=False)
    p.add_argument("--seed", type=_u64, default=d(None), help="run seed (REFLAB_SEED overrides)")
    p.add_argument("--config", type=Path, default=d(None), help="JSON experiment config")
    p.add_argument("--out", type=Path, default=d(Path("run")), help="output directory (default: ./run)")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = _Parser(prog="reflab", description=__doc__.splitlines()[0], parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True

    p = sub.add_parser("generate", parents=[common], help="write dataset.jsonl and qa.jsonl")
    p.add_argument("--n", type=_positive, default=None, help="instances (default: config train/dev/test sizes)")
    p.add_argument("--split", default="train", help="split label used with --n")

    p = sub.add_parser("diagnose", parents=[common], help="stage 1: easy / hard split and votes")
    p.add_argument("--data", type=Path, default=None, help="dataset to diagnose (default: OUT/dataset.jsonl)")

    sub.add_parser("adversarial", parents=[common], help="stages 2 and 3: adversarial rewrites")

    p = sub.add_parser("train", parents=[common], help="train the configured runs")
    p.add_argument("--run", action="append", default=None, help="run name (repeatable; default: all)")

    p = sub.add_parser("eval", parents=[common], help="per-split accuracies as JSON")
    p.add_argument("--run", action="append", default=None, help="run name (repeatable; default: all)")
    p.add_argument("--checkpoint", type=Path, default=None, help="evaluate this checkpoint instead")
    p.add_argument("--data", type=Path, default=None, help="dataset for --checkpoint")

    sub.add_parser("report", parents=[common], help="markdown and CSV report")
    return parser


def _eval_checkpoint(cfg: ExperimentConfig, seed: int, out: Path, ckpt: Path, data: Optional[Path]) -> list[Path]:
    params = io.load_checkpoint(ckpt)
    instances = io.load_dataset(data) if data is not None else pipeline.eval_dataset(out)
    res = {"checkpoint": str(ckpt)}
    res.update(
        pipeline.evaluate_params(params, instances, [], seed, cfg.panel.stage1.iou_threshold, cfg.model.lmax)
    )
    path = out / "eval" / "checkpoint.json"
    io.write_json(path, res)
    return [path]


def run_command(args: argparse.Namespace, cfg: ExperimentConfig, seed: int) -> list[Path]:
    out: Path = args.out
    if args.command == "generate":
        return pipeline.stage_generate(cfg, seed, out, args.n, args.split)
    if args.command == "diagnose":
        return pipeline.stage_diagnose(cfg, seed, out, args.data)
    if args.command == "adversarial":
        return pipeline.stage_adversarial(cfg, seed, out)
    if args.command == "train":
        return pipeline.stage_train(cfg, seed, out, args.run)
    if args.command == "eval":
        if args.checkpoint is not None:
            return _eval_checkpoint(cfg, seed, out, args.checkpoint, args.data)
        return pipeline.stage_eval(cfg, seed, out, args.run)
    if args.command == "report":
        return pipeline.stage_report(cfg, seed, out)
    raise _UsageError(f"unknown command {args.command!r}")


def replay_manifest(manifest_path, out) -> list[str]:
    """Re-run the command recorded in a manifest into ``out``.

    Inputs the command reads (earlier stages) must already be in ``out``.
    Returns the recorded outputs whose new bytes differ from the manifest.
    """
    manifest, cfg = read_manifest(manifest_path)
    args = build_parser().parse_args(manifest["argv"])
    args.out = Path(out)
    args.out.mkdir(parents=True, exist_ok=True)
    run_command(args, cfg, manifest["seed"])
    return verify_outputs(manifest, out)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        seed = resolve_seed(args.seed)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"reflab: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config) if args.config is not None else ExperimentConfig()
        if getattr(args, "run", None):
            cfg_names = {r.name for r in cfg.runs}
            unknown = [r for r in args.run if r not in cfg_names]
            if unknown:
                print(f"reflab: unknown run(s): {', '.join(unknown)}", file=sys.stderr)
                return 2
        args.out.mkdir(parents=True, exist_ok=True)
        outputs = run_command(args, cfg, seed)
        write_manifest(args.out, args.command, argv, cfg, seed, outputs)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"reflab: {exc.filename}: no such file", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to status 1
        log.debug("failure", exc_info=True)
        print(f"reflab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for p in outputs:
        log.info("wrote %s", p)
    return 0
