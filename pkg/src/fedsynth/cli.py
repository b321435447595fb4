"""Command-line entry points.

Each pipeline stage is a subcommand reading/writing the artifact directory,
so a run can be debugged stage by stage:

    fedsynth make-corpus --out corpus.bin --per-class 150
    fedsynth run --config desk.cfg
    fedsynth coreset --config desk.cfg            # rerun one stage
    fedsynth run --config desk.cfg --stage perturb
    fedsynth report --config desk.cfg
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .harness import ExperimentConfig, StageError, load_config

STAGES = {
    "partition": harness.stage_partition,
    "train-local": harness.stage_train_local,
    "coreset": harness.stage_coreset,
    "perturb": harness.stage_perturb,
    "synthesize": harness.stage_synthesize,
    "serve-train": harness.stage_server_train,
    "evaluate": harness.stage_evaluate,
    "privacy-report": harness.stage_privacy,
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="experiment config file (flat key = value)")
    parser.add_argument("--out", default=None, help="override the artifact directory")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument(
        "--deterministic", action="store_true", help="force deterministic backend algorithms"
    )


def _load(args: argparse.Namespace) -> ExperimentConfig:
    overrides: dict = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    cfg = load_config(args.config, overrides)
    cfg.validate()
    from .seeding import set_backend_deterministic

    set_backend_deterministic(cfg.deterministic)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsynth",
        description="One-shot federated learning via privacy-perturbed latent distillates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full pipeline (or one stage via --stage)")
    _add_common(run)
    run.add_argument("--stage", choices=sorted(STAGES), default=None, help="run a single stage")

    for name in STAGES:
        stage = sub.add_parser(name, help=f"run only the {name} stage")
        _add_common(stage)

    report = sub.add_parser("report", help="re-emit tables and plots from reports/report.json")
    _add_common(report)

    corpus = sub.add_parser("make-corpus", help="generate the synthetic shape corpus")
    corpus.add_argument("--out", required=True, help="archive file (.bin) or directory for a PNG tree")
    corpus.add_argument("--per-class", type=int, default=150)
    corpus.add_argument("--side", type=int, default=32)
    corpus.add_argument("--seed", type=int, default=0)
    corpus.add_argument("--tree", action="store_true", help="write a class-per-directory PNG tree")

    config = sub.add_parser("write-config", help="write a config file with defaults")
    config.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "make-corpus":
            from . import datagen

            if args.tree:
                count = datagen.write_corpus_tree(args.out, args.per_class, args.side, args.seed)
                print(f"wrote {count} images under {args.out}")
            else:
                payload = datagen.write_corpus_archive(args.out, args.per_class, args.side, args.seed)
                print(f"wrote corpus archive {args.out} ({payload} payload bytes)")
            return 0
        if args.command == "write-config":
            harness.write_sample_config(args.out)
            print(f"wrote defaults to {args.out}")
            return 0

        cfg = _load(args)
        if args.command == "run" and args.stage is None:
            report = harness.run_pipeline(cfg)
            for m in report.methods:
                print(f"{m.name}: accuracy {m.accuracy:.4f}, payload {m.payload_bytes} B")
            print(f"report written under {Path(cfg.out_dir) / 'reports'}")
            return 0
        if args.command == "report":
            data = json.loads(
                (Path(cfg.out_dir) / "reports" / "report.json").read_text(encoding="utf-8")
            )
            files = harness.emit_report(
                harness.ExperimentReport.from_dict(data), Path(cfg.out_dir) / "reports"
            )
            print("\n".join(str(f) for f in files))
            return 0
        stage_name = args.stage if args.command == "run" else args.command
        out = STAGES[stage_name](cfg)
        print(json.dumps(out, indent=2, sort_keys=True, default=str))
        return 0
    except (StageError, harness.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
