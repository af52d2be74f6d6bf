"""
Command-line entry point.

    python -m src.cli train --config config/desk.yaml --train.epochs 2
    python -m src.cli eval --checkpoint runs/checkpoint_pvlr.pvlr --per-class
    python -m src.cli gradcheck
    python -m src.cli ablate --config config/desk.yaml --studies ladder centers
    python -m src.cli sweep-lambda --config config/desk.yaml --values 0.5 1 2 4 8
    python -m src.cli export-maps --checkpoint runs/checkpoint_pvlr.pvlr --samples 0 1
    python -m src.cli gen-data --config config/desk.yaml

Any unrecognised ``--section.field value`` pair overrides the config.
Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O or format error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd

from src.data.synthdata import dump_split
from src.evaluation.metrics import ScoreMatrix, evaluate, per_class_ap
from src.head.export import export_maps
from src.training.config import load_config, parse_override_args
from src.training.experiments import GRADCHECK_VARIANTS, ablate, run_gradcheck, sweep_lambda
from src.training.trainer import Trainer, build_data, train
from src.utils.data_formats import DataLoader, FileNamingConventions
from src.utils.errors import EXIT_NUMERIC, EXIT_OK, ConfigError, PvlrError, exit_code_for

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvlr", description="Train and study the PVLR multi-label head on synthetic data.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", type=str, default=None, help="YAML or JSON run config")
        return p

    p = with_config(sub.add_parser("train", help="Train one configuration"))
    p.add_argument("--resume", type=str, default=None, help="Checkpoint to continue from")

    p = with_config(sub.add_parser("eval", help="Evaluate a checkpoint or a pair of score/target CSVs"))
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--scores", type=str, default=None, help="Score CSV (header of class names)")
    p.add_argument("--targets", type=str, default=None, help="Target CSV matching --scores")
    p.add_argument("--live", action="store_true", help="Evaluate live weights instead of EMA shadows")
    p.add_argument("--per-class", action="store_true", help="Also write per-class AP")
    p.add_argument("--out", type=str, default=None, help="Output directory (default: config output_dir)")

    p = with_config(sub.add_parser("gradcheck", help="Finite-difference check of the full head objective"))
    p.add_argument("--variants", nargs="+", default=None, choices=sorted(GRADCHECK_VARIANTS))
    p.add_argument("--tolerance", type=float, default=None)

    p = with_config(sub.add_parser("ablate", help="Run ablation studies"))
    p.add_argument("--studies", nargs="+", default=None)
    p.add_argument("--seeds", nargs="+", type=int, default=None)

    p = with_config(sub.add_parser("sweep-lambda", help="Sweep the KCR weight"))
    p.add_argument("--values", nargs="+", type=float, default=None)
    p.add_argument("--seeds", nargs="+", type=int, default=None)

    p = with_config(sub.add_parser("export-maps", help="Write attention maps of test samples as CSV"))
    p.add_argument("--checkpoint", type=str, default=None, help="Trained checkpoint (default: untrained head)")
    p.add_argument("--samples", nargs="+", type=int, default=[0])
    p.add_argument("--out", type=str, default=None)

    with_config(sub.add_parser("gen-data", help="Dump the synthetic splits"))
    return parser


def cmd_train(args, overrides) -> int:
    if args.resume:
        if args.config or overrides:
            raise ConfigError("--resume continues the checkpoint's own config; drop --config and field overrides")
        trainer = Trainer.from_checkpoint(args.resume)
        start_step = trainer.step
        epoch_log = trainer.fit(progress=args.progress)
        report, matrix = trainer.evaluate()
        store = DataLoader(trainer.config.output_dir)
        earlier = store.load_epoch_log(trainer.config.run_name)
        if earlier is not None:
            kept = earlier[earlier["step"] <= start_step]
            epoch_log = pd.concat([kept, epoch_log], ignore_index=True) if len(epoch_log) else kept
        store.save_epoch_log(epoch_log, trainer.config.run_name)
        store.save_metrics(report.to_frame(), trainer.config.run_name)
        trainer.save(Path(trainer.config.output_dir) / FileNamingConventions.get_checkpoint_filename(trainer.config.run_name))
    else:
        report = train(load_config(args.config, overrides), progress=args.progress).report
    print(report.summary())
    return EXIT_OK


def cmd_eval(args, overrides) -> int:
    if args.scores or args.targets:
        if not (args.scores and args.targets):
            raise ConfigError("--scores and --targets must be given together")
        matrix = ScoreMatrix.from_csv(args.scores, args.targets)
        out_dir, run = Path(args.out or "."), Path(args.scores).stem
        report = evaluate(matrix)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --scores/--targets")
        trainer = Trainer.from_checkpoint(args.checkpoint)
        report, matrix = trainer.evaluate(use_ema=False if args.live else None)
        out_dir, run = Path(args.out or trainer.config.output_dir), f"{trainer.config.run_name}_eval"
    store = DataLoader(out_dir)
    store.save_metrics(report.to_frame(), run)
    if args.per_class:
        store.save_per_class_ap(per_class_ap(matrix), run)
    print(report.summary())
    return EXIT_OK


def cmd_gradcheck(args, overrides) -> int:
    config = load_config(args.config, overrides)
    tolerance = args.tolerance if args.tolerance is not None else config.experiments.gradcheck_tolerance
    reports = run_gradcheck(args.variants, tolerance, output_dir=config.output_dir, seed=config.train.seed,
                            progress=args.progress)
    failed = [name for name, report in reports.items() if not report.passed(tolerance)]
    for name, report in reports.items():
        worst, err = report.worst()
        print(f"{name:22s} {'ok' if name not in failed else 'FAIL'}  worst {worst} {err:.2e}")
    if failed:
        logger.error(f"Gradient check failed for {failed}")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_ablate(args, overrides) -> int:
    config = load_config(args.config, overrides)
    for study, (_, summary) in ablate(config, args.studies, args.seeds, progress=args.progress).items():
        cols = [c for c in ("mode", "map_mean", "map_std", "cf1_mean", "of1_mean", "sec_per_batch_mean") if c in summary]
        print(f"\n== {study} ==")
        print(summary[cols].to_string(index=False))
    return EXIT_OK


def cmd_sweep(args, overrides) -> int:
    config = load_config(args.config, overrides)
    _, summary = sweep_lambda(config, args.values, args.seeds, progress=args.progress)
    cols = [c for c in ("lambda_kcr", "map_mean", "map_std", "cf1_mean", "of1_mean") if c in summary]
    print(summary[cols].to_string(index=False))
    return EXIT_OK


def cmd_export_maps(args, overrides) -> int:
    if args.checkpoint:
        trainer = Trainer.from_checkpoint(args.checkpoint)
    else:
        trainer = Trainer(load_config(args.config, overrides))
    out_dir = Path(args.out or Path(trainer.config.output_dir) / "maps")
    test = trainer.data.test
    for sample in args.samples:
        if not 0 <= sample < len(test):
            raise ConfigError(f"sample {sample} outside the test split (size {len(test)})")
        with trainer.ema.swapped_in(trainer.params):
            output = trainer.head.forward(test.features(sample))
        export_maps(output, trainer.data.vocabulary.names, out_dir, sample)
    return EXIT_OK


def cmd_gen_data(args, overrides) -> int:
    config = load_config(args.config, overrides)
    data = build_data(config)
    out_dir = Path(config.output_dir) / "data"
    for name, split in (("train", data.train), ("test", data.test)):
        dump_split(split, name, out_dir, data.vocabulary, config.dataset)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "sweep-lambda": cmd_sweep,
    "export-maps": cmd_export_maps,
    "gen-data": cmd_gen_data,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    args.progress = args.log_level in ("DEBUG", "INFO")
    try:
        overrides = parse_override_args(extra)
        return COMMANDS[args.command](args, overrides)
    except (PvlrError, OSError) as e:
        code = exit_code_for(e)
        logger.error(f"{args.command} failed: {e}")
        return code


if __name__ == "__main__":
    sys.exit(main())
