"""Unified command surface: phantom, preprocess, train, sample, evaluate,
report, run, and reader-serve subcommands.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config

log = logging.getLogger(__name__)


def _cmd_phantom(args) -> int:
    from .phantom import make_corpus

    split_map = make_corpus(
        out_dir=Path(args.out),
        n_cases=args.cases,
        train_fraction=args.train_fraction,
        image_size=args.size,
        depth=args.depth,
        seed=args.seed,
        laterality=args.laterality,
    )
    n_train = sum(1 for s in split_map.values() if s == "train")
    print(f"wrote {len(split_map)} phantom cases ({n_train} train) to {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    from .pipeline import preprocess_cases

    manifest = preprocess_cases(
        Path(args.cases),
        Path(args.out),
        adjacent_fraction=args.adjacent_fraction,
        seed=args.seed,
        single_breast=args.single_breast,
    )
    print(f"wrote {len(manifest.records)} records to {args.out}")
    return 0


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "variant", None):
        cfg.variant = args.variant
    if getattr(args, "manifest", None):
        cfg.data.manifest = str(args.manifest)
    if getattr(args, "out", None):
        cfg.output_dir = str(args.out)
    if getattr(args, "steps", None):
        cfg.training.steps = args.steps
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_train(args) -> int:
    from .pipeline import train_from_config

    cfg = _load_cfg(args)
    ckpt = train_from_config(cfg, Path(cfg.output_dir))
    print(f"final EMA checkpoint: {ckpt}")
    return 0


def _cmd_sample(args) -> int:
    from .pipeline import sample_split

    out = sample_split(
        Path(args.checkpoint),
        Path(args.manifest),
        Path(args.out),
        steps=args.steps,
        seed=args.seed,
        split=args.split,
        sigma_rule=args.sigma_rule,
    )
    print(f"samples written to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import evaluate_run, per_case_csv, render_text_table

    modes = tuple("full_image" if m == "full" else m for m in args.modes.split(","))
    report = evaluate_run(
        Path(args.manifest),
        Path(args.generated),
        modes=modes,
        model_row_name=args.row_name,
        variant_target=args.variant_target,
    )
    out = Path(args.out)
    out.write_text(report.to_json())
    out.with_suffix(".txt").write_text(render_text_table(report) + "\n")
    out.with_suffix(".csv").write_text(per_case_csv(report))
    print(render_text_table(report))
    return 0


def _cmd_report(args) -> int:
    from .evaluation import EvalReport, per_case_csv, render_text_table

    report = EvalReport.from_json(Path(args.report).read_text())
    print(render_text_table(report))
    if args.csv:
        Path(args.csv).write_text(per_case_csv(report))
    return 0


def _cmd_run(args) -> int:
    from .pipeline import run_pipeline

    cfg = load_config(args.config)
    manifest = run_pipeline(cfg, cases_dir=Path(args.cases) if args.cases else None, force=args.force)
    print(f"run complete; report at {manifest['report']}")
    return 0


def _cmd_reader_serve(args) -> int:
    import uvicorn

    from .reader_study import create_app

    app = create_app(Path(args.pool), state_dir=Path(args.state_dir) if args.state_dir else None)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cesynth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic paired-volume corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=32)
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--depth", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--laterality", choices=["bilateral", "unilateral"], default="bilateral")
    p.set_defaults(fn=_cmd_phantom)

    p = sub.add_parser("preprocess", help="slice paired volumes into a PNG dataset")
    p.add_argument("--cases", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--adjacent-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--single-breast", action="store_true")
    p.set_defaults(fn=_cmd_preprocess)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--variant", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("sample", help="sample synthetic post images for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="test")
    p.add_argument("--sigma-rule", choices=["posterior", "beta"], default="posterior")
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("evaluate", help="score generated images against the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--generated", required=True)
    p.add_argument("--modes", default="full,roi")
    p.add_argument("--out", default="report.json")
    p.add_argument("--row-name", default="model")
    p.add_argument("--variant-target", choices=["PC", "SUB"], default="PC")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("report", help="render a saved report as table/CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("run", help="full pipeline: train, sample, evaluate, figures")
    p.add_argument("--config", required=True)
    p.add_argument("--cases", default=None, help="run preprocess on this corpus first")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("reader-serve", help="serve the blinded reader-study backend")
    p.add_argument("--pool", required=True)
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--state-dir", default=None)
    p.set_defaults(fn=_cmd_reader_serve)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
