#!/usr/bin/env python3
"""Command-line entry point for the information-flow toolkit.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Sequence

from pydantic import ValidationError

from config.logging_config import setup_logging
from services.checkpoint import save_checkpoint
from services.cliff_analysis import Metric, plant_cliff_model
from services.errors import ContractError
from services.mini_lvlm import HookPoint
from services.synthetic_tasks import SyntheticTask, TaskKind, generate_task
from services.truncation import ScoreRowMode, TruncationMode
from stages.cliff_stage import CliffStage
from stages.model_stage import ModelStage
from stages.orchestrator import AnalysisOrchestrator
from stages.schemas import RunConfig, echo_run_config, load_run_config
from stages.truncation_stage import TruncationStage

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
TASK_CHOICES = [kind.value for kind in TaskKind]


def _set(target: Dict[str, Any], dotted: str, value: Any) -> None:
    """Set ``a.b.c`` in a nested override dict when ``value`` was given."""
    if value is None:
        return
    *parents, leaf = dotted.split(".")
    for key in parents:
        target = target.setdefault(key, {})
    target[leaf] = value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="infoflow", description="Information-flow analysis for mini vision-language models"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--output-dir", help="Output directory (overrides OUTPUT_DIR)")
    common.add_argument("--seed", type=int, help="Run seed")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--n-layers", type=int)
    model_flags.add_argument("--n-heads", type=int)
    model_flags.add_argument("--d-model", type=int)
    model_flags.add_argument("--d-ff", type=int)
    model_flags.add_argument("--vocab-size", type=int)
    model_flags.add_argument("--patch-grid", type=int, nargs=2, metavar=("H", "W"))
    model_flags.add_argument("--patch-dim", type=int)
    model_flags.add_argument("--max-seq", type=int)
    model_flags.add_argument("--image-block-from", type=int, help="Planted cliff layer")

    input_flags = argparse.ArgumentParser(add_help=False)
    input_flags.add_argument("--checkpoint", help="Model checkpoint (read only)")
    input_flags.add_argument("--task", choices=TASK_CHOICES, help="Synthetic task kind")
    input_flags.add_argument("--input-index", type=int, help="Task instance to analyze")

    init = subparsers.add_parser("init-model", parents=[common, model_flags], help="Write a seeded checkpoint")
    init.add_argument("--output", help="Checkpoint path (default <output-dir>/model.ckpt)")

    train = subparsers.add_parser(
        "train-toy", parents=[common, model_flags, input_flags], help="Train on a synthetic task"
    )
    train.add_argument("--tasks", nargs="+", choices=TASK_CHOICES, help="Task kinds to train on")
    train.add_argument("--steps", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--momentum", type=float)
    train.add_argument("--image-dropout", type=float)
    train.add_argument("--output", help="New checkpoint path (default <output-dir>/trained.ckpt)")

    analyze = subparsers.add_parser(
        "analyze", parents=[common, model_flags, input_flags], help="Influence profile and CAM overlays"
    )
    analyze.add_argument("--cam-layers", type=int, nargs="+")
    analyze.add_argument("--noise", type=float, help="CAM noise std")
    analyze.add_argument("--samples", type=int, help="CAM samples per layer")
    analyze.add_argument("--hook-point", choices=[h.value for h in HookPoint])
    analyze.add_argument("--answer-tokens", type=int)

    truncate = subparsers.add_parser(
        "truncate", parents=[common, model_flags, input_flags], help="Image-token truncation"
    )
    truncate.add_argument("--layer", type=int)
    truncate.add_argument("--k", type=int)
    truncate.add_argument("--score-row", choices=[m.value for m in ScoreRowMode])
    truncate.add_argument("--mode", choices=[m.value for m in TruncationMode])
    truncate.add_argument("--max-new", type=int)
    truncate.add_argument("--sweep", action="store_true", default=None, help="Also sweep every layer")

    cliff = subparsers.add_parser(
        "cliff", parents=[common, model_flags, input_flags], help="Cliff-layer sweeps"
    )
    cliff.add_argument("--tasks", nargs="+", choices=TASK_CHOICES)
    cliff.add_argument("--epsilon", type=float)
    cliff.add_argument("--metric", choices=[m.value for m in Metric])
    cliff.add_argument("--threshold", type=float)
    cliff.add_argument("--planted", type=int, nargs="+", help="Also sweep replanted copies")
    cliff.add_argument("--n-instances", type=int)

    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    flags = vars(args)
    mapping = {
        "output_dir": "output_dir",
        "seed": "seed",
        "checkpoint": "checkpoint",
        "input_index": "input_index",
        "n_layers": "model.n_layers",
        "n_heads": "model.n_heads",
        "d_model": "model.d_model",
        "d_ff": "model.d_ff",
        "vocab_size": "model.vocab_size",
        "patch_dim": "model.patch_dim",
        "max_seq": "model.max_seq",
        "image_block_from": "model.image_block_from",
        "steps": "training.steps",
        "batch_size": "training.batch_size",
        "lr": "training.lr",
        "momentum": "training.momentum",
        "image_dropout": "training.image_dropout",
        "cam_layers": "cam.layers",
        "noise": "cam.noise_s",
        "samples": "cam.n_samples",
        "hook_point": "cam.hook_point",
        "answer_tokens": "cam.answer_tokens",
        "layer": "truncation.layer",
        "k": "truncation.k",
        "score_row": "truncation.score_row_mode",
        "mode": "truncation.mode",
        "max_new": "truncation.max_new",
        "sweep": "truncation.sweep",
        "epsilon": "cliff.epsilon",
        "metric": "cliff.metric",
        "threshold": "cliff.threshold",
        "planted": "cliff.planted_layers",
        "n_instances": "cliff.n_instances",
    }
    for flag, dotted in mapping.items():
        _set(overrides, dotted, flags.get(flag))
    if flags.get("patch_grid"):
        _set(overrides, "model.patch_grid", list(flags["patch_grid"]))
    if flags.get("seed") is not None and args.command == "init-model":
        _set(overrides, "model.seed", flags["seed"])
    if flags.get("task"):
        _set(overrides, "task.kind", flags["task"])
    if args.command == "cliff" and flags.get("tasks"):
        _set(overrides, "cliff.tasks", flags["tasks"])
    return overrides


def _load_model(config: RunConfig):
    return ModelStage().run({"checkpoint": config.checkpoint, "model_spec": config.model})["model"]


def _prompt(config: RunConfig, model):
    task = config.task_or_default()
    batch = generate_task(task.model_copy(update={"n_instances": config.input_index + 1}), model.config)
    return batch.prompt(config.input_index)


def cmd_init_model(args: argparse.Namespace, config: RunConfig) -> int:
    if config.model.image_block_from is not None:
        model = plant_cliff_model(config.model, config.model.image_block_from)
        config = config.model_copy(update={"model": model.config})
    else:
        model = _load_model(config.model_copy(update={"checkpoint": None}))
    path = Path(args.output) if args.output else Path(config.output_dir) / "model.ckpt"
    save_checkpoint(model, path)
    echo_run_config(config, config.output_dir)
    print(f"✓ Wrote {path} ({model.parameter_count()} parameters)")
    return EXIT_OK


def cmd_train_toy(args: argparse.Namespace, config: RunConfig) -> int:
    kinds = args.tasks or ([config.task.kind] if config.task else [])
    if not kinds:
        raise ContractError("train-toy needs at least one task (--tasks or 'task' in the config)")
    tasks = [SyntheticTask(kind=kind, seed=config.seed) for kind in kinds]

    output = Path(args.output) if args.output else Path(config.output_dir) / "trained.ckpt"
    if config.checkpoint and Path(config.checkpoint).resolve() == output.resolve():
        raise ContractError("train-toy never overwrites its input checkpoint; choose another --output")

    result = ModelStage().run(
        {
            "checkpoint": config.checkpoint,
            "model_spec": config.model,
            "train_tasks": tasks,
            "training": config.training,
        }
    )
    save_checkpoint(result["model"], output)
    echo_run_config(config, config.output_dir)
    print(f"✓ Trained for {len(result['losses'])} steps, final loss {result['losses'][-1]:.4f}; wrote {output}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace, config: RunConfig) -> int:
    state = AnalysisOrchestrator().run(config)
    print(f"✓ Analysis written to {config.output_dir} (summary {state['summary_path']})")
    return EXIT_OK


def cmd_truncate(args: argparse.Namespace, config: RunConfig) -> int:
    model = _load_model(config)
    result = TruncationStage().run(
        {
            "model": model,
            "prompt": _prompt(config, model),
            "truncation": config.truncation,
            "output_dir": config.output_dir,
        }
    )
    echo_run_config(config, config.output_dir)
    savings = result["savings"]
    print(
        f"✓ Answer {result['baseline_answer']} -> {result['truncated_answer']}; "
        f"kept {savings['kept_tokens']}/{savings['full_tokens']} tokens, "
        f"FLOP ratio {savings['flop_ratio']:.4f}"
    )
    return EXIT_OK


def cmd_cliff(args: argparse.Namespace, config: RunConfig) -> int:
    kinds = config.cliff.tasks or [config.require_task().kind]
    tasks = [
        SyntheticTask(kind=kind, seed=config.seed, n_instances=config.cliff.n_instances) for kind in kinds
    ]
    result = CliffStage().run(
        {
            "model": _load_model(config),
            "tasks": tasks,
            "cliff": config.cliff,
            "output_dir": config.output_dir,
        }
    )
    echo_run_config(config, config.output_dir)
    for name, layer in result["cliff_layers"].items():
        print(f"✓ {name}: cliff layer {layer if layer is not None else 'none'}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "init-model": cmd_init_model,
    "train-toy": cmd_train_toy,
    "analyze": cmd_analyze,
    "truncate": cmd_truncate,
    "cliff": cmd_cliff,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv``, run the subcommand and return its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE

    setup_logging()
    try:
        config = load_run_config(args.config, _overrides(args))
        return COMMANDS[args.command](args, config)
    except (ValidationError, ContractError) as e:
        print(f"✗ Usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True, extra={"subcommand": args.command})
        print(f"✗ {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
