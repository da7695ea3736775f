import argparse
import asyncio
import logging
import sys
from pathlib import Path

import torch

from config import settings
from core import experiment_runner
from core.config_validator import load_experiment_config
from core.exceptions import ConfigurationError, StageError
from db.database import Database


class RepeatedWarningFilter(logging.Filter):
    """Lets the first occurrence of a numerics warning through and drops identical repeats."""

    def __init__(self):
        super().__init__()
        self.seen = set()

    def filter(self, record):
        # CG curvature and damping notices fire once per epoch on hard problems
        if record.levelno != logging.WARNING or not record.name.startswith("core.numerics"):
            return True
        msg = record.getMessage()
        if msg in self.seen:
            return False
        self.seen.add(msg)
        return True


def configure_logging(log_dir=settings.LOG_DIR):
    log_dir = Path(log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)

    root = logging.getLogger()
    root.setLevel(logging.INFO)
    for handler in list(root.handlers):
        root.removeHandler(handler)

    repeat_filter = RepeatedWarningFilter()

    # 1. Console Handler - WARNING and above only
    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.WARNING)
    console_handler.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))
    console_handler.addFilter(repeat_filter)
    root.addHandler(console_handler)

    # 2. Main Log File - INFO level (detailed)
    file_format = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    file_handler = logging.FileHandler(log_dir / 'metastnet.log')
    file_handler.setLevel(logging.INFO)
    file_handler.setFormatter(file_format)
    file_handler.addFilter(repeat_filter)
    root.addHandler(file_handler)

    # 3. Error Log File - ERROR level (aborted stages)
    error_handler = logging.FileHandler(log_dir / 'errors.log')
    error_handler.setLevel(logging.ERROR)
    error_handler.setFormatter(file_format)
    root.addHandler(error_handler)

    # 4. Loss Register - one line per meta-training epoch, kept out of the main log
    loss_register_logger = logging.getLogger('loss_register')
    loss_register_logger.setLevel(logging.INFO)
    loss_register_logger.propagate = False
    for handler in list(loss_register_logger.handlers):
        loss_register_logger.removeHandler(handler)
    loss_handler = logging.FileHandler(log_dir / 'losses.log')
    loss_handler.setLevel(logging.INFO)
    loss_handler.setFormatter(logging.Formatter('%(asctime)s,%(message)s'))
    loss_register_logger.addHandler(loss_handler)


logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment file with KEY=VALUE lines")
    common.add_argument("--seed", type=int, help="overrides SEED")
    common.add_argument("--out", default=str(settings.DEFAULT_OUT_DIR), help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep points")
    common.add_argument("--log-dir", default=str(settings.LOG_DIR))

    parser = argparse.ArgumentParser(prog="metastnet", description="Meta-learned traffic forecasting with conformal intervals")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="write a simulated series as CSV files")
    sub.add_parser("train-meta", parents=[common], help="meta-train on simulated tasks, save the initialisation")

    finetune = sub.add_parser("finetune", parents=[common], help="fine-tune a checkpoint on the target training split")
    finetune.add_argument("--checkpoint", required=True)

    predict = sub.add_parser("predict", parents=[common], help="forecast the target test split")
    predict.add_argument("--checkpoint", required=True)

    conformal = sub.add_parser("conformal", parents=[common], help="calibrate intervals on the target series")
    conformal.add_argument("--alpha", type=float, action="append", help="miscoverage level, repeatable")
    conformal.add_argument("--folds", type=int, default=None, help="K for cross-conformal calibration")
    conformal.add_argument("--scheme", choices=["icp", "ccp"], default="ccp")
    conformal.add_argument("--checkpoint", help="use this model instead of meta-training one")

    evaluate = sub.add_parser("evaluate", parents=[common], help="score a predictions or interval CSV")
    evaluate.add_argument("predictions")

    experiment = sub.add_parser("experiment", parents=[common], help="run the configured experiment end to end")
    experiment.add_argument("--no-registry", action="store_true", help="do not record the run in the SQLite registry")
    return parser


def _dispatch(args, cfg):
    out = Path(args.out)
    if args.command == "simulate":
        return experiment_runner.run_simulate(cfg, out)
    if args.command == "train-meta":
        return experiment_runner.run_train_meta(cfg, out)
    if args.command == "finetune":
        return experiment_runner.run_finetune(cfg, args.checkpoint, out)
    if args.command == "predict":
        return experiment_runner.run_predict(cfg, args.checkpoint, out)
    if args.command == "conformal":
        alphas = args.alpha or list(cfg.alphas)
        k = args.folds if args.folds is not None else cfg.folds[0]
        if k < 2:
            raise ConfigurationError(f"--folds: K must be >= 2, got {k}")
        return experiment_runner.run_conformal(cfg, out, alphas, k, args.scheme, args.checkpoint)
    if args.command == "evaluate":
        return experiment_runner.run_evaluate(cfg, args.predictions, out)
    if args.command == "experiment":
        db = None if args.no_registry else Database()
        report, _ = asyncio.run(experiment_runner.run_experiment(cfg, out, jobs=args.jobs, db=db))
        return report
    raise ConfigurationError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_dir)
    torch.set_num_threads(settings.TORCH_NUM_THREADS)

    try:
        if args.jobs < 1:
            raise ConfigurationError(f"--jobs: must be >= 1, got {args.jobs}")
        cfg = load_experiment_config(args.config, overrides={"SEED": args.seed})
    except ConfigurationError as e:
        print(f"[config] {e}", file=sys.stderr)
        return 1

    logger.info(f"Running {args.command} (seed {cfg.seed})")
    try:
        result = _dispatch(args, cfg)
    except StageError as e:
        print(str(e), file=sys.stderr)
        return 2
    except ConfigurationError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"[{args.command}] {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        print(f"[{args.command}] {type(e).__name__}: {e}", file=sys.stderr)
        return 2

    logger.info(f"{args.command} finished: {result}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
