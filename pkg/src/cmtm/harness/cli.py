"""Command line interface.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure, 3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..checkpoint import load_checkpoint, save_checkpoint
from ..errors import CheckpointError, ConfigError, NumericalError, UsageError
from ..synthvid import make_corpus, save_corpus
from .ablation import run_ablation, write_csv
from .config import RunConfig, load_config
from .experiment import evaluate, train, write_log, write_report
from .gradcheck import gradcheck

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

logger = logging.getLogger("cmtm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmtm", description="Cross-modality token modulation experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic video corpus")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--config", type=Path, help="take frame size and length from a run config")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--log", type=Path, help="per-step loss log (default: OUT with .log.jsonl)")

    p = sub.add_parser("eval", help="score a checkpoint on a corpus directory")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--report", required=True, type=Path)
    p.add_argument("--tol-px", type=int, default=1)

    p = sub.add_parser("ablate", help="run one ablation table and write it as CSV")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--table", required=True, type=int, choices=(3, 4))
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--max-entries", type=int, default=None)
    return parser


def _run(args) -> int:
    if args.command == "gen-data":
        if args.scenes < 1:
            raise UsageError("--scenes must be at least 1")
        cfg = load_config(args.config) if args.config else RunConfig()
        save_corpus(make_corpus(args.scenes, args.seed, cfg.scene_config()), args.out)
        print(f"wrote {args.scenes} sequences to {args.out}")
    elif args.command == "train":
        cfg = load_config(args.config)
        ckpt, log = train(cfg)
        save_checkpoint(ckpt, args.out)
        log_path = args.log or args.out.with_name(args.out.name + ".log.jsonl")
        write_log(log, log_path)
        final = f"{log[-1]['loss']:.6f}" if log else "n/a"
        print(f"trained {cfg.steps} steps, final loss {final}; checkpoint {args.out}")
    elif args.command == "eval":
        report = evaluate(load_checkpoint(args.ckpt), args.data, args.tol_px)
        write_report(report, args.report)
        print(f"J={report.j_mean:.4f} F={report.f_mean:.4f} G={report.g_mean:.4f}")
    elif args.command == "ablate":
        cells = run_ablation(load_config(args.config), tables=(args.table,))[args.table]
        write_csv(cells, args.out)
        for cell in cells:
            print(f"{cell.version:>4} {cell.knobs} G={cell.g} {cell.status}")
    elif args.command == "gradcheck":
        report = gradcheck(load_config(args.config), args.max_entries)
        print("\n".join(report.lines()))
        if not report.passed:
            return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
