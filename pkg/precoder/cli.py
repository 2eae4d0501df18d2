"""Command-line entry point.

  precoder gen-data --out data/shapes --seed 7 --sequences 100 --length 30 --size 32
  precoder train --config configs/toy.yaml --out runs/toy
  precoder eval --checkpoint runs/toy/checkpoint --data data/held_out --out runs/toy/eval
  precoder rollout --checkpoint runs/toy/checkpoint --data data/held_out --out runs/toy/rollout
  precoder verify
  precoder param-count --preset table1
"""
from __future__ import annotations

import logging
import os
import sys
from argparse import ArgumentParser, Namespace
from typing import Any, Sequence

import numpy as np

from precoder import __version__
from precoder.constants import BATCH_SIZE, CONTEXT_FRAMES, ROLLOUT_HORIZON, ExitCode
from precoder.data import (
    SequenceDataset,
    SyntheticSpec,
    generate_synthetic,
    split_recordings,
    stack_windows,
)
from precoder.evaluation import (
    NEXT_FRAME_HEADER,
    ROLLOUT_HEADER,
    evaluate_next_frame,
    evaluate_rollout,
)
from precoder.io import (
    checkpoint_precision,
    load_checkpoint,
    load_frames,
    save_checkpoint,
    save_dataset,
    save_frames,
    write_loss_history,
    write_metric_rows,
)
from precoder.precnet import (
    PRESETS,
    NetworkConfig,
    NetworkWeights,
    build_variant,
    count_parameters,
    parameter_shapes,
)
from precoder.tensor import NumericError, precision
from precoder.training import AdamState, EpochRecord, TrainConfig, train
from precoder.util import configure_logging, dump_yaml, load_yaml
from precoder.verify import run_checks

RUN_MANIFEST = "run.yaml"


def write_run_manifest(directory: str, command: str, config: dict[str, Any]) -> None:
    """Echo the fully resolved configuration of a run next to its outputs."""
    os.makedirs(directory, exist_ok=True)
    manifest = {"command": command, "version": __version__, **config}
    dump_yaml(os.path.join(directory, RUN_MANIFEST), manifest)


def gen_data(args: Namespace) -> int:
    content = load_yaml(args.config) if args.config else {}
    for name in ("seed", "channels", "shape_count"):
        if getattr(args, name) is not None:
            content[name] = getattr(args, name)
    if args.size is not None:
        content["canvas"] = args.size
    spec = SyntheticSpec.from_dict(content)
    dataset = generate_synthetic(spec, args.sequences, args.length)
    save_dataset(dataset, args.out)
    write_run_manifest(
        args.out,
        "gen-data",
        {"seed": spec.seed, "sequences": args.sequences, "length": args.length, **spec.to_dict()},
    )
    return ExitCode.SUCCESS


def _training_data(config: TrainConfig) -> tuple[SequenceDataset, SequenceDataset | None]:
    dataset = load_frames(config.dataset, every=config.every)
    if config.validation_dataset:
        return dataset, load_frames(config.validation_dataset, every=config.every)
    if len(dataset) < 2:
        logging.warning("A single recording cannot be split; training without validation")
        return dataset, None
    return split_recordings(dataset, config.validation_fraction)


def _resume(path: str) -> tuple[NetworkWeights, AdamState, int, list[EpochRecord]]:
    weights, moments, manifest = load_checkpoint(path)
    names = [name for name, _ in weights.parameters()]
    if "optimizer" not in manifest:
        raise ValueError(f"Checkpoint {path} holds no optimizer state to resume from")
    adam = AdamState.from_checkpoint(names, moments, manifest["optimizer"])
    history = [EpochRecord(**record) for record in manifest.get("history", [])]
    return weights, adam, int(manifest["epoch"]), history


def train_command(args: Namespace) -> int:
    content = load_yaml(args.config)
    for name in ("epochs", "seed", "dataset", "precision"):
        if getattr(args, name) is not None:
            content[name] = getattr(args, name)
    config = TrainConfig.from_dict(content)
    if config.dataset is None:
        raise ValueError("No training dataset given (set `dataset` or pass --dataset)")
    network = NetworkConfig.from_dict(config.network)

    with precision(config.precision):
        train_set, validation_set = _training_data(config)
        train_set.check_divisible(2**network.top)
        windows = stack_windows(train_set, config.sequence_length, config.stride)
        validation = None
        if validation_set is not None:
            validation = stack_windows(validation_set, config.sequence_length, config.stride)

        adam, start_epoch, history = None, 0, []
        if args.resume:
            weights, adam, start_epoch, history = _resume(args.resume)
            if weights.config != network:
                raise ValueError(f"Checkpoint {args.resume} was trained with another network")
        else:
            weights = build_variant(network, seed=config.seed)
        logging.info(
            f"Training {count_parameters(network):,} parameters on {len(windows)} windows "
            f"from epoch {start_epoch} of {config.epochs}"
        )
        result = train(
            weights,
            windows,
            config,
            validation=validation,
            adam=adam,
            start_epoch=start_epoch,
            stop_epoch=args.stop_epoch,
            progress=not args.quiet,
        )

    history += result.history
    save_checkpoint(
        os.path.join(args.out, "checkpoint"),
        result.weights,
        result.adam,
        epoch=result.next_epoch,
        extra={"history": [vars(record) for record in history]},
    )
    write_loss_history(os.path.join(args.out, "loss.csv"), history)
    write_run_manifest(
        args.out,
        "train",
        {
            **config.to_dict(),
            "network": network.to_dict(),
            "resume": args.resume,
        },
    )
    return ExitCode.SUCCESS


def _load_for_evaluation(args: Namespace) -> tuple[NetworkWeights, SequenceDataset, str]:
    weights, _, manifest = load_checkpoint(args.checkpoint)
    dataset = load_frames(args.data, every=args.every)
    return weights, dataset, checkpoint_precision(manifest)


def eval_command(args: Namespace) -> int:
    weights, dataset, name = _load_for_evaluation(args)
    os.makedirs(args.out, exist_ok=True)
    with precision(name):
        result = evaluate_next_frame(
            weights, dataset, args.context, args.batch_size, progress=not args.quiet
        )
    write_metric_rows(os.path.join(args.out, "next_frame.csv"), NEXT_FRAME_HEADER, result.rows())
    dump_yaml(os.path.join(args.out, "summary.yaml"), result.summary())
    write_run_manifest(
        args.out,
        "eval",
        {
            "checkpoint": args.checkpoint,
            "data": args.data,
            "context": args.context,
            "every": args.every,
            "batch_size": args.batch_size,
            "precision": name,
        },
    )
    return ExitCode.SUCCESS


def rollout_command(args: Namespace) -> int:
    weights, dataset, name = _load_for_evaluation(args)
    with precision(name):
        result = evaluate_rollout(
            weights,
            dataset,
            args.context,
            args.horizon,
            args.batch_size,
            keep_predictions=not args.no_frames,
            progress=not args.quiet,
        )
    os.makedirs(args.out, exist_ok=True)
    write_metric_rows(os.path.join(args.out, "rollout.csv"), ROLLOUT_HEADER, result.rows())
    summary = {f"T{horizon}": values for horizon, values in result.summary().items()}
    dump_yaml(os.path.join(args.out, "summary.yaml"), summary)
    for index, frames in enumerate(result.predictions):
        save_frames(os.path.join(args.out, "frames", f"window_{index:04d}"), frames)
    write_run_manifest(
        args.out,
        "rollout",
        {
            "checkpoint": args.checkpoint,
            "data": args.data,
            "context": args.context,
            "horizon": args.horizon,
            "every": args.every,
            "batch_size": args.batch_size,
            "precision": name,
        },
    )
    return ExitCode.SUCCESS


def verify_command(args: Namespace) -> int:
    if args.checkpoint:
        load_checkpoint(args.checkpoint)
    results = run_checks(samples=args.samples, seed=args.seed)
    failed = [r.name for r in results if not r.passed]
    if failed:
        logging.error(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        return ExitCode.CHECK_FAILED
    logging.info(f"All {len(results)} checks passed")
    return ExitCode.SUCCESS


def param_count_command(args: Namespace) -> int:
    if args.config:
        content = load_yaml(args.config)
        config = NetworkConfig.from_dict(content.get("network", content))
    else:
        config = NetworkConfig.from_preset(args.preset, variant=args.variant)
    for name, shape in parameter_shapes(config):
        print(f"{name:32s} {str(shape):24s} {int(np.prod(shape)):>12,}")
    print(f"{'total':57s} {count_parameters(config):>12,}")
    return ExitCode.SUCCESS


def _add_evaluation_arguments(parser: ArgumentParser) -> None:
    parser.add_argument("--checkpoint", type=str, required=True)
    parser.add_argument("--data", type=str, required=True)
    parser.add_argument("--out", type=str, required=True)
    parser.add_argument("--context", type=int, default=CONTEXT_FRAMES)
    parser.add_argument("--every", type=int, default=1)
    parser.add_argument("--batch-size", type=int, default=BATCH_SIZE)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="precoder", description="Predictive-coding video prediction")
    parser.add_argument("--debug", "-d", action="store_true")
    parser.add_argument("--quiet", "-q", action="store_true", help="no progress bars")
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="render a synthetic bouncing-shapes dataset")
    gen.add_argument("--out", type=str, required=True)
    gen.add_argument("--config", type=str, default=None, help="YAML with synthetic settings")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--sequences", type=int, default=100)
    gen.add_argument("--length", type=int, default=30)
    gen.add_argument("--size", type=int, default=None)
    gen.add_argument("--channels", type=int, default=None)
    gen.add_argument("--shape-count", type=int, default=None)
    gen.set_defaults(run=gen_data)

    trainer = commands.add_parser("train", help="train a network from a YAML configuration")
    trainer.add_argument("--config", type=str, required=True)
    trainer.add_argument("--out", type=str, required=True)
    trainer.add_argument("--dataset", type=str, default=None)
    trainer.add_argument("--epochs", type=int, default=None)
    trainer.add_argument("--seed", type=int, default=None)
    trainer.add_argument("--precision", choices=("single", "double"), default=None)
    trainer.add_argument("--resume", type=str, default=None, help="checkpoint directory")
    trainer.add_argument(
        "--stop-epoch", type=int, default=None, help="pause before this epoch; resume later"
    )
    trainer.set_defaults(run=train_command)

    evaluator = commands.add_parser("eval", help="next-frame metrics and copy-last baseline")
    _add_evaluation_arguments(evaluator)
    evaluator.set_defaults(run=eval_command)

    roller = commands.add_parser("rollout", help="closed-loop multi-frame prediction")
    _add_evaluation_arguments(roller)
    roller.add_argument("--horizon", type=int, default=ROLLOUT_HORIZON)
    roller.add_argument("--no-frames", action="store_true", help="skip writing frames")
    roller.set_defaults(run=rollout_command)

    checker = commands.add_parser("verify", help="gradient, count and metric self-checks")
    checker.add_argument("--samples", type=int, default=None, help="entries per tensor")
    checker.add_argument("--seed", type=int, default=0)
    checker.add_argument("--checkpoint", type=str, default=None)
    checker.set_defaults(run=verify_command)

    counter = commands.add_parser("param-count", help="enumerate network parameters")
    counter.add_argument("--config", type=str, default=None)
    counter.add_argument("--preset", choices=sorted(PRESETS), default="table1")
    counter.add_argument("--variant", choices=("standard", "single_lstm"), default="standard")
    counter.set_defaults(run=param_count_command)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(debug=args.debug)
    try:
        return int(args.run(args))
    except NumericError as e:
        logging.error(f"Numeric failure: {e}")
        return ExitCode.NUMERIC_ERROR
    except OSError as e:
        logging.error(f"I/O error: {e}")
        return ExitCode.IO_ERROR
    except ValueError as e:
        logging.error(f"Invalid input: {e}")
        return ExitCode.VALIDATION_ERROR


if __name__ == "__main__":
    sys.exit(main())
