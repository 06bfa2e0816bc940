"""
PVT-COV19D command-line entry point

Usage:
    python main.py gen-synth --out data/train --cases-per-class 30 --seed 0
    python main.py train --data data --out output/run1 [--config run.env] [--seed 0]
    python main.py eval --data data/val --checkpoint output/run1/best_checkpoint.pvtc [--rounds 10]
    python main.py predict --case-dir data/val/covid/case_0003 --checkpoint output/run1/best_checkpoint.pvtc

stdout carries the machine-readable result of each command; progress goes to
stderr. Exit codes: 0 ok, 1 numeric failure, 2 I/O or format, 3 config/usage.
"""
import argparse
import json
import math
import sys
import traceback
from pathlib import Path
from typing import List, Optional

import pvt_config as config
from checkpoint import CheckpointFormatError
from ct_data import DatasetError, PreprocessSpec, load_case, load_dataset
from evaluation import EvalReporter, evaluate
from pvt_model import PvtConfig, PvtModel
from slice_sampler import SliceSampler, VotingConfig, diagnose_case, write_verdicts
from synthetic_data import SyntheticSpec, generate_synthetic, manifest_summary
from trainer import LOSS_CURVE_NAME, TrainConfig, TrainingDivergedError, train

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_IO = 2
EXIT_CONFIG = 3

DEFAULT_OUTPUT_DIR = 'output'


class UsageError(config.ConfigError):
    """Bad command line"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _banner(title: str):
    print("\n" + "=" * 80, file=sys.stderr)
    print(title, file=sys.stderr)
    print("=" * 80, file=sys.stderr)


def _emit(payload):
    print(payload if isinstance(payload, str) else json.dumps(payload))


def _finite_or_none(value: float) -> Optional[float]:
    return None if value is None or math.isnan(value) else value


def _checkpoint_config(checkpoint: Path, config_path: Optional[str], overrides) -> config.RunConfig:
    """Config travelling with the checkpoint, else --config, else defaults"""
    source = config.resolved_config_beside(checkpoint) or config_path
    if source is not None:
        print(f"✓ Config: {source}", file=sys.stderr)
    return config.RunConfig.load(source, overrides)


def _load_model(checkpoint: Path, run_config: config.RunConfig) -> PvtModel:
    if not checkpoint.is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    model = PvtModel.load(checkpoint, PvtConfig.from_run_config(run_config))
    print(f"✓ Loaded {model.parameter_count():,} parameters from {checkpoint}", file=sys.stderr)
    return model


def cmd_gen_synth(args) -> int:
    run_config = config.RunConfig.load(args.config, {'seed': args.seed,
                                                     'synth_cases_per_class': args.cases_per_class})
    spec = SyntheticSpec.from_run_config(run_config)
    _banner(f"GENERATING SYNTHETIC DATASET -> {args.out}")
    manifest = generate_synthetic(spec, args.out)
    summary = manifest_summary(manifest, args.out)
    print(f"\n✓ {summary['cases']} cases, {summary['slices']} slices", file=sys.stderr)
    _emit(summary)
    return EXIT_OK


def cmd_train(args) -> int:
    run_config = config.RunConfig.load(args.config, {'seed': args.seed})
    data = Path(args.data)
    out_dir = Path(args.out)

    _banner("STEP 1: LOADING DATA")
    train_set = load_dataset(data / 'train')
    print(f"✓ Train: {train_set.summary()}", file=sys.stderr)
    val_set = None
    if (data / 'val').is_dir():
        val_set = load_dataset(data / 'val')
        print(f"✓ Validation: {val_set.summary()}", file=sys.stderr)
    else:
        print(f"⚠ No {data / 'val'}; the last epoch's weights are kept", file=sys.stderr)

    _banner("STEP 2: BUILDING MODEL")
    seeds = config.split_seeds(run_config['seed'])
    model = PvtModel(PvtConfig.from_run_config(run_config), seed=seeds['init'])
    print(model.parameter_table().to_string(index=False), file=sys.stderr)

    result = train(train_set.cases, model, TrainConfig.from_run_config(run_config),
                   PreprocessSpec.from_run_config(run_config),
                   val_cases=val_set.cases if val_set else None, out_dir=out_dir, run_config=run_config)
    _emit({
        'best_checkpoint': str(result.best_checkpoint),
        'loss_curve': str(out_dir / LOSS_CURVE_NAME),
        'resolved_config': str(out_dir / config.RESOLVED_CONFIG_NAME),
        'best_epoch': result.best_epoch,
        'best_val_macro_f1': _finite_or_none(result.best_val_macro_f1),
        'steps': result.steps,
    })
    return EXIT_OK


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint)
    run_config = _checkpoint_config(checkpoint, args.config, {'seed': args.seed, 'vote_rounds': args.rounds})
    model = _load_model(checkpoint, run_config)
    dataset = load_dataset(args.data)
    print(f"✓ Data: {dataset.summary()}", file=sys.stderr)

    report = evaluate(dataset.cases, model, VotingConfig(run_config['vote_rounds']),
                      config.split_seeds(run_config['seed'])['eval'],
                      PreprocessSpec.from_run_config(run_config),
                      sigma_divisor=run_config['sigma_divisor'], batch_size=run_config['batch_size'],
                      workers=run_config['eval_workers'])
    report.check_consistency()
    EvalReporter.print_report(report)
    if args.verdicts:
        print(f"✓ Verdicts: {write_verdicts(report.verdicts, args.verdicts)}", file=sys.stderr)
    _emit(report.to_json())
    return EXIT_OK


def cmd_predict(args) -> int:
    checkpoint = Path(args.checkpoint)
    run_config = _checkpoint_config(checkpoint, args.config, {'seed': args.seed, 'vote_rounds': args.rounds})
    model = _load_model(checkpoint, run_config)
    case = load_case(args.case_dir)
    if case is None:
        raise DatasetError(f"no readable slices in {args.case_dir}")

    sampler = SliceSampler(batch_size=run_config['batch_size'], sigma_divisor=run_config['sigma_divisor'],
                           seed=config.split_seeds(run_config['seed'])['sampler'])
    verdict = diagnose_case(case, model, sampler, VotingConfig(run_config['vote_rounds']),
                            PreprocessSpec.from_run_config(run_config))
    EvalReporter.print_verdict(verdict)
    _emit(verdict.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='pvt-cov19d', description="PVT-COV19D: CT scan COVID-19 diagnosis")
    commands = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    gen = commands.add_parser('gen-synth', help="write a synthetic CT-like dataset tree")
    gen.add_argument('--out', required=True)
    gen.add_argument('--cases-per-class', type=int)
    gen.add_argument('--seed', type=int)
    gen.add_argument('--config')
    gen.set_defaults(handler=cmd_gen_synth)

    tr = commands.add_parser('train', help="train on <data>/train, validate on <data>/val")
    tr.add_argument('--data', required=True)
    tr.add_argument('--config')
    tr.add_argument('--out', default=DEFAULT_OUTPUT_DIR)
    tr.add_argument('--seed', type=int)
    tr.set_defaults(handler=cmd_train)

    ev = commands.add_parser('eval', help="voting evaluation of a checkpoint on a labeled tree")
    ev.add_argument('--data', required=True)
    ev.add_argument('--checkpoint', required=True)
    ev.add_argument('--rounds', type=int)
    ev.add_argument('--seed', type=int)
    ev.add_argument('--config')
    ev.add_argument('--verdicts', help="also write per-case verdicts as JSON lines")
    ev.set_defaults(handler=cmd_eval)

    pr = commands.add_parser('predict', help="diagnose one case directory")
    pr.add_argument('--case-dir', required=True)
    pr.add_argument('--checkpoint', required=True)
    pr.add_argument('--rounds', type=int)
    pr.add_argument('--seed', type=int)
    pr.add_argument('--config')
    pr.set_defaults(handler=cmd_predict)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and map its failure, if any, to the exit-code contract"""
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except config.ConfigError as e:
        print(f"\n❌ Configuration Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointFormatError as e:
        print(f"\n❌ Checkpoint Format Error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"\n❌ I/O Error: {e}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDivergedError, FloatingPointError) as e:
        print(f"\n❌ Numeric Failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\nExiting...", file=sys.stderr)
        sys.exit(0)
    except Exception as e:
        print(f"\n❌ Unexpected error: {e}", file=sys.stderr)
        traceback.print_exc()
        sys.exit(EXIT_NUMERIC)
