"""Command-line entry point: ``crowdcount {synth,train,eval,gridding,render}``.

Exit status is 0 on success, 1 for usage errors and 2 for runtime or data errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import AnnotationParseError, load_dataset, read_pnm, synth_dataset, write_dataset
from .density import write_pgm
from .mdc import DilationStack, receptive_coverage
from .model import CrowdCounter
from .tensor import DimensionError, NonFiniteError, Tensor, no_grad
from .trainer import TrainingDivergedError, evaluate, train

CONFIG_NAME = "config.txt"
MODEL_NAME = "model.bin"
LOG_NAME = "train_log.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crowdcount", description="Density-map crowd counting on synthetic scenes.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config", type=Path)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--loss", choices=["full", "dm", "weak"])
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="report MAE / MSE / NAE of a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--config", type=Path, help=f"defaults to {CONFIG_NAME} beside the checkpoint")

    g = sub.add_parser("gridding", help="receptive-field coverage of a dilated conv stack")
    g.add_argument("--stack", required=True, help="comma-separated kernel:dilation pairs, e.g. 3:2,3:2,3:2")
    g.add_argument("--out", type=Path, help="also write the coverage grid as a graymap")

    r = sub.add_parser("render", help="predict one image's density map as a graymap")
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--image", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--config", type=Path, help=f"defaults to {CONFIG_NAME} beside the checkpoint")
    return p


def _with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    return dataclasses.replace(
        cfg,
        model=dataclasses.replace(cfg.model, seed=seed),
        optim=dataclasses.replace(cfg.optim, seed=seed),
        synth=dataclasses.replace(cfg.synth, seed=seed),
    )


def _load_model(checkpoint: Path, config: Path | None) -> CrowdCounter:
    if config is None and (checkpoint.parent / CONFIG_NAME).exists():
        config = checkpoint.parent / CONFIG_NAME
    cfg = load_config(config)
    model = CrowdCounter(cfg.model)
    model.load_state_dict(load_checkpoint(checkpoint))
    return model.eval()


def cmd_synth(args) -> int:
    cfg = _with_seed(load_config(args.config), args.seed)
    manifest = write_dataset(args.out, synth_dataset(cfg.synth))
    print(f"wrote {cfg.synth.n_scenes} scenes to {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _with_seed(load_config(args.config), args.seed)
    if args.loss is not None:
        cfg = dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, kind=args.loss))
    scenes = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / CONFIG_NAME).write_text(dump_config(cfg))
    model = CrowdCounter(cfg.model)
    with open(args.out / LOG_NAME, "w") as log:
        def on_epoch(entry):
            line = entry.line()
            print(line, flush=True)
            log.write(line + "\n")
            log.flush()
        train(model, scenes, cfg.loss, cfg.optim, out_dir=args.out, on_epoch=on_epoch)
    save_checkpoint(args.out / MODEL_NAME, model.state_dict())
    print("train-set " + evaluate(model, scenes).line())
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint, args.config)
    report = evaluate(model, load_dataset(args.data))
    print(report.table())
    print(report.line())
    return 0


def cmd_gridding(args) -> int:
    cov = receptive_coverage(DilationStack.parse(args.stack))
    print(f"holes: {'yes' if cov.has_holes else 'no'}")
    print(f"radius: {cov.radius}")
    print("axis offsets: " + " ".join(str(v) for v in sorted(cov.axis_offsets)))
    print(cov.ascii())
    if args.out is not None:
        write_pgm(args.out, cov.grid().astype(np.float64))
    return 0


def cmd_render(args) -> int:
    model = _load_model(args.checkpoint, args.config)
    image = read_pnm(args.image)
    with no_grad():
        dm = model(Tensor(image[None].astype(model.dtype))).data[0, 0]
    write_pgm(args.out, dm)
    print(f"count={float(dm.sum()):.4f}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "gridding": cmd_gridding, "render": cmd_render}
RUNTIME_ERRORS = (ConfigError, DimensionError, CheckpointError, AnnotationParseError, NonFiniteError,
                  TrainingDivergedError, KeyError, ValueError, OSError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        print(parser.format_usage(), end="", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        print(parser.format_help(), end="", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except RUNTIME_ERRORS as exc:
        print(f"crowdcount {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
