"""
Command-line entry point.

    python cli.py train   --config run.json [--data DIR] [--out DIR] [--seed N]
    python cli.py eval    model.lbq (--config run.json | --dataset SPEC) [--data DIR]
    python cli.py pack    --config run.json [--out DIR] [--seed N]
    python cli.py inspect model.lbq

Exit codes: 0 success, 2 configuration error, 3 training diverged,
4 unreadable packed model file.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from config import Config, RunConfig, describe_validation_error, load_run_config
from data import Cifar10Spec, DatasetSpec, SyntheticSpec, load_dataset
from errors import ConfigError, DatasetFormatError, PackedFormatError, TrainingDiverged
from models import build_model
from packing import describe, load_model, read_packed, save_model, write_packed
from train import evaluate, fit

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_FORMAT = 4


def _prepare_run(args) -> RunConfig:
    config = load_run_config(args.config).resolved(data_dir=args.data, output_dir=args.out, seed=args.seed)
    Path(config.output_dir).mkdir(parents=True, exist_ok=True)
    return config


def cmd_train(args) -> int:
    config = _prepare_run(args)
    out = Path(config.output_dir)
    (out / "config.resolved.json").write_text(config.to_json() + "\n", encoding="utf-8")
    train_ds, val_ds = load_dataset(config.dataset, args.data or Config.DATA_DIR)
    model = build_model(config.model_settings())
    fit(model, train_ds, val_ds, config.train_settings(), out / "metrics.csv")
    write_packed(save_model(model), out / "model.lbq")
    logger.info(f"Run finished, artifacts in {out}")
    return EXIT_OK


def parse_dataset_spec(text: str) -> DatasetSpec:
    """``synthetic[:key=value,...]`` or ``cifar10[:PATH]``."""
    kind, _, rest = text.partition(":")
    if kind == "cifar10":
        return Cifar10Spec(path=rest or None)
    if kind == "synthetic":
        options = {}
        for item in filter(None, rest.split(",")):
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"Dataset option {item!r} is not key=value")
            options[key.strip()] = value.strip()
        return SyntheticSpec(**options)
    raise ConfigError(f"Unknown dataset {kind!r} (expected 'synthetic' or 'cifar10')")


def cmd_eval(args) -> int:
    packed = read_packed(args.model)
    if args.config:
        config = load_run_config(args.config).resolved(data_dir=args.data)
        spec, batch_size = config.dataset, config.batch_size
    else:
        spec, batch_size = parse_dataset_spec(args.dataset), 256
    _, test_ds = load_dataset(spec, args.data or Config.DATA_DIR)
    model = load_model(packed)
    loss, accuracy = evaluate(model, test_ds, batch_size)
    print(f"loss={loss:.8f} accuracy={accuracy:.8f}")
    return EXIT_OK


def cmd_pack(args) -> int:
    config = _prepare_run(args)
    model = build_model(config.model_settings())
    write_packed(save_model(model), Path(config.output_dir) / "model.lbq")
    return EXIT_OK


def cmd_inspect(args) -> int:
    print(describe(read_packed(args.model)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="Train, pack and inspect low-bit-weight image classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from a run config")
    train.add_argument("--config", required=True, help="run config (JSON)")
    train.add_argument("--data", help="CIFAR-10 directory (overrides LOWBIT_DATA_DIR)")
    train.add_argument("--out", help="output directory (overrides the config)")
    train.add_argument("--seed", type=int, help="seed (overrides the config)")
    train.set_defaults(handler=cmd_train)

    evaluate_cmd = sub.add_parser("eval", help="evaluate a packed model on a test split")
    evaluate_cmd.add_argument("model", help="packed model file (.lbq)")
    source = evaluate_cmd.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", help="run config naming the dataset")
    source.add_argument("--dataset", help="synthetic[:key=value,...] or cifar10[:PATH]")
    evaluate_cmd.add_argument("--data", help="CIFAR-10 directory (overrides LOWBIT_DATA_DIR)")
    evaluate_cmd.set_defaults(handler=cmd_eval)

    pack = sub.add_parser("pack", help="write the configured model, untrained, as a packed file")
    pack.add_argument("--config", required=True, help="run config (JSON)")
    pack.add_argument("--out", help="output directory (overrides the config)")
    pack.add_argument("--seed", type=int, help="seed (overrides the config)")
    pack.set_defaults(handler=cmd_pack, data=None)

    inspect = sub.add_parser("inspect", help="report the contents of a packed model")
    inspect.add_argument("model", help="packed model file (.lbq)")
    inspect.set_defaults(handler=cmd_inspect)
    return parser


def _fail(code: int, message: str) -> int:
    logger.error(message)
    print(f"error: {message}", file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=Config.LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.handler(args)
    except ValidationError as e:
        return _fail(EXIT_CONFIG, f"invalid configuration: {describe_validation_error(e)}")
    except (ConfigError, DatasetFormatError) as e:
        return _fail(EXIT_CONFIG, str(e))
    except TrainingDiverged as e:
        return _fail(EXIT_DIVERGED, str(e))
    except PackedFormatError as e:
        return _fail(EXIT_FORMAT, f"{type(e).__name__}: {e}")
    except OSError as e:
        if args.command in ("eval", "inspect"):
            return _fail(EXIT_FORMAT, f"cannot read {args.model}: {e}")
        raise


if __name__ == "__main__":
    sys.exit(main())
