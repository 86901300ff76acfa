"""Command-line entry points tying the pipeline stages together."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

import torch

from . import pipeline, synthetic
from .config import ConfigError, load_config, write_config
from .datamodel import SMOOTHING_KINDS, Task

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3


def _add_config_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, type=Path,
                        help="experiment config YAML")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config's root seed")


def _add_task_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--task", required=True,
                        choices=[t.value for t in Task],
                        help="prediction task")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="affectkit",
        description="Frame-level facial affect: masked-autoencoder "
                    "pretraining, task fine-tuning, temporal multimodal "
                    "fusion, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data",
                       help="generate a self-contained toy dataset + config")
    p.add_argument("--out", required=True, type=Path,
                   help="directory to create (config.yaml + data/)")
    p.add_argument("--videos", type=int, default=12)
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--gap-rate", type=float, default=0.1,
                   help="fraction of frames missing from each archive")
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("pretrain",
                       help="train the masked autoencoder on all frames")
    _add_config_arg(p)

    p = sub.add_parser("finetune",
                       help="train a task head on the pretrained encoder")
    _add_config_arg(p)
    _add_task_arg(p)

    p = sub.add_parser("fuse-train",
                       help="train the temporal fusion model on "
                            "vision+audio features")
    _add_config_arg(p)
    _add_task_arg(p)

    p = sub.add_parser("predict",
                       help="write per-frame predictions for every video")
    _add_config_arg(p)
    _add_task_arg(p)
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="fusion checkpoint (default: the config's out dir)")
    p.add_argument("--smooth", choices=SMOOTHING_KINDS, default=None,
                   help="override the configured smoothing policy")
    p.add_argument("--out", type=Path, default=None,
                   help="prediction CSV path")

    p = sub.add_parser("evaluate",
                       help="score a prediction CSV against labels")
    p.add_argument("--config", type=Path, default=None,
                   help="experiment config (supplies default paths)")
    p.add_argument("--seed", type=int, default=None, help=argparse.SUPPRESS)
    _add_task_arg(p)
    p.add_argument("--predictions", type=Path, default=None)
    p.add_argument("--labels", type=Path, default=None)
    p.add_argument("--report", type=Path, default=None,
                   help="where to write the metrics JSON")

    p = sub.add_parser("crossval",
                       help="cross-validate the fusion stage over video folds")
    _add_config_arg(p)
    _add_task_arg(p)
    p.add_argument("--folds", type=int, default=None,
                   help="override crossval.n_folds")
    p.add_argument("--smooth", choices=SMOOTHING_KINDS, default="none",
                   help="smoothing applied before fold scoring")

    return parser


def _load_config(args) -> "pipeline.ExperimentConfig":
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _cmd_synth_data(args) -> int:
    out_dir = args.out
    videos = synthetic.make_videos(
        n_videos=args.videos, n_frames=args.frames,
        image_size=args.image_size, seed=args.seed, gap_rate=args.gap_rate)
    synthetic.write_dataset(out_dir / "data", videos)
    write_config(out_dir / "config.yaml", {
        "version": 1,
        "seed": args.seed,
        "data_dir": "data",
        "out_dir": "out",
        "mae": {"image_size": args.image_size, "patch_size": 8,
                "channels": 1, "encoder_dim": 64, "encoder_depth": 2,
                "encoder_heads": 4, "decoder_dim": 32, "decoder_depth": 1,
                "decoder_heads": 4, "mask_ratio": 0.75},
        "pretrain": {"lr": 0.002, "batch_size": 16, "steps": 60,
                     "log_every": 10},
        "finetune": {"lr": 0.001, "batch_size": 32, "epochs": 2,
                     "val_fraction": 0.25},
        "features": {"audio": "label_correlated", "audio_dim": 16,
                     "audio_rate": 50.0, "video_rate": 25.0},
        "fusion": {"d_model": 64, "n_layers": 2, "n_heads": 4,
                   "dropout": 0.1, "clip_length": 25, "lr": 0.001,
                   "batch_size": 8, "epochs": 5, "val_fraction": 0.25},
        "smoothing": {"au": {"kind": "gaussian", "sigma": 5.0, "window": 10},
                      "expr": {"kind": "gaussian", "sigma": 25.0,
                               "window": 25},
                      "va": {"kind": "gaussian", "sigma": 25.0,
                             "window": 50}},
        "crossval": {"n_folds": 3},
    })
    print(f"wrote {args.videos} videos x {args.frames} frames under {out_dir}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    ckpt = pipeline.run_pretrain(_load_config(args))
    print(f"pretrained checkpoint: {ckpt}")
    return EXIT_OK


def _cmd_finetune(args) -> int:
    ckpt = pipeline.run_finetune(_load_config(args), Task(args.task))
    print(f"finetuned checkpoint: {ckpt}")
    return EXIT_OK


def _cmd_fuse_train(args) -> int:
    ckpt = pipeline.run_fuse_train(_load_config(args), Task(args.task))
    print(f"fusion checkpoint: {ckpt}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    out = pipeline.run_predict(_load_config(args), Task(args.task),
                               checkpoint=args.checkpoint,
                               smooth_override=args.smooth,
                               out_path=args.out)
    print(f"predictions: {out}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    task = Task(args.task)
    if args.config is not None:
        config = _load_config(args)
        predictions = args.predictions or pipeline.predictions_path(config,
                                                                    task)
        labels = args.labels or pipeline.labels_path(config, task)
        report_path = args.report or (config.out_dir
                                      / f"report_{task.value}.json")
    else:
        if args.predictions is None or args.labels is None:
            raise ConfigError("evaluate needs --predictions and --labels "
                              "when no --config is given")
        predictions, labels = args.predictions, args.labels
        report_path = args.report
    report = pipeline.run_evaluate(task, predictions, labels, report_path)
    print(f"{task.value} aggregate: {report.aggregate:.6f} "
          f"over {report.n_frames} frames")
    if report.degenerate_flags:
        print(f"degenerate outputs: {', '.join(report.degenerate_flags)}")
    if report_path is not None:
        print(f"report: {report_path}")
    return EXIT_OK


def _cmd_crossval(args) -> int:
    summary = pipeline.run_crossval(_load_config(args), Task(args.task),
                                    n_folds=args.folds,
                                    smooth_override=args.smooth)
    print(f"crossval summary: {summary}")
    return EXIT_OK


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "fuse-train": _cmd_fuse_train,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "crossval": _cmd_crossval,
}


def main(argv: Optional[list[str]] = None) -> int:
    """Entry point. Exit codes: 0 ok, 2 usage/config errors, 3 I/O failures."""
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = _COMMANDS[args.command]
    try:
        return handler(args)
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
