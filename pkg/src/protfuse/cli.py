"""Command-line entry point.

Subcommands: fixtures, build-data, train, eval, generate, ablate. One config
file drives everything; ``--set dotted.key=value`` overrides individual keys.
Exit codes: 0 success, 2 configuration error, 3 data/input error, 4 runtime
failure.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

from .config import ConfigError, default_config_text, load_run_config
from .fixtures import generate_fixture_corpus
from .instruction_data import DatasetSplitError, ManifestSchemaError
from .pipeline import (MissingInputError, ablate_pipeline, build_datasets,
                       evaluate_pipeline, generate_one, train_pipeline)
from .protein_io import MissingStructureError, StructureParseError
from .training import (CheckpointCorruptionError, CheckpointVersionError,
                       InvalidOverrideError, NonFiniteLossError)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

_CONFIG_ERRORS = (ConfigError, InvalidOverrideError)
_DATA_ERRORS = (MissingInputError, ManifestSchemaError, DatasetSplitError,
                StructureParseError, MissingStructureError,
                CheckpointCorruptionError, CheckpointVersionError, FileNotFoundError)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="run config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protfuse",
        description="Desk-scale multimodal protein understanding pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixtures", help="synthesize the desk corpus into data.dir")
    _add_common(p)
    p.add_argument("--write-config", type=Path, default=None,
                   help="also write a commented example config to this path")

    p = sub.add_parser("build-data", help="build instruction datasets from the fixture corpus")
    _add_common(p)

    p = sub.add_parser("train", help="run warm-up plus the configured stage pipeline per seed")
    _add_common(p)

    p = sub.add_parser("eval", help="generate and score answers on the test split")
    _add_common(p)
    p.add_argument("--checkpoints", nargs="*", type=Path, default=None,
                   help="explicit checkpoint files (default: out dir per configured seed)")

    p = sub.add_parser("generate", help="answer one question about stored protein(s)")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--protein", required=True,
                   help="protein id, or two comma-separated ids for pair questions")
    p.add_argument("--question", required=True,
                   help="question text containing one <protein> literal per id")

    p = sub.add_parser("ablate", help="run the ablation grid and emit a side-by-side table")
    _add_common(p)
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_run_config(args.config, args.overrides)

    if args.command == "fixtures":
        counts = generate_fixture_corpus(cfg.data_dir, cfg.fixture_config())
        for key, value in sorted(counts.items()):
            print(f"{key}: {value}")
        if args.write_config:
            args.write_config.write_text(default_config_text(), encoding="utf-8")
            print(f"wrote example config to {args.write_config}")
        print(f"fixture corpus written to {cfg.data_dir}")
        return EXIT_OK

    if args.command == "build-data":
        counts = build_datasets(cfg)
        for task, per_split in sorted(counts.items()):
            rendered = ", ".join(f"{k}={v}" for k, v in sorted(per_split.items()))
            print(f"{task}: {rendered}")
        print(f"datasets written under {cfg.out_dir / 'datasets'}")
        return EXIT_OK

    if args.command == "train":
        paths = train_pipeline(cfg)
        for path in paths:
            print(f"checkpoint: {path}")
        return EXIT_OK

    if args.command == "eval":
        eval_reports = evaluate_pipeline(cfg, args.checkpoints)
        for r in eval_reports:
            print(f"{r.task_tag} {r.metric}: {r.mean:.4f} +/- {r.std:.4f} (n={r.num_examples})")
        print(f"report written under {cfg.out_dir}")
        return EXIT_OK

    if args.command == "generate":
        protein_ids = [pid.strip() for pid in args.protein.split(",") if pid.strip()]
        answer = generate_one(cfg, args.checkpoint, protein_ids, args.question)
        print(answer)
        return EXIT_OK

    if args.command == "ablate":
        rows = ablate_pipeline(cfg)
        columns = list(rows[0].keys())
        print("\t".join(columns))
        for row in rows:
            print("\t".join(str(row[c]) for c in columns))
        print(f"table written under {cfg.out_dir}")
        return EXIT_OK

    raise AssertionError(f"unhandled command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
