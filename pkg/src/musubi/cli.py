"""``musubi`` entry point: dispatches ``generate``/``train``/``eval`` to the step
modules and chains them in ``pipeline``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Callable, Optional

from .evaluation import main as eval_main
from .training import main as train_main
from .world import main as generate_main

_COMMANDS: dict[str, tuple[Callable[[Optional[list[str]]], int], str]] = {
    "generate": (generate_main, "Generate the synthetic train/eval datasets"),
    "train": (train_main, "Run one training stage"),
    "eval": (eval_main, "Evaluate a checkpoint (report, predictions, K-sweep plot)"),
}


def _config_argv(args: argparse.Namespace) -> list[str]:
    argv = ["--out", str(args.out)]
    if args.config is not None:
        argv += ["--config", str(args.config)]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    for item in args.overrides:
        argv += ["--set", item]
    if args.verbose:
        argv.append("--verbose")
    return argv


def _run(name: str, argv: list[str]) -> None:
    rc = _COMMANDS[name][0](argv)
    if rc != 0:
        raise RuntimeError(f"musubi {name} exited with status {rc}")


def _build_pipeline_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="musubi pipeline",
        description="Run generate -> train stages 1, 2, 3 -> eval into one output directory",
    )
    p.add_argument("--config", default=None, help="YAML run config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--k-sweep", default=None, help="Comma-separated paragraph lengths for eval")
    p.add_argument("--baseline", choices=("none", "beam-search"), default="none")
    p.add_argument("--verbose", action="store_true")
    return p


def pipeline_main(argv: Optional[list[str]] = None) -> int:
    args = _build_pipeline_parser().parse_args(argv)
    out = Path(args.out)
    common = _config_argv(args)
    try:
        _run("generate", common)
        previous: Optional[Path] = None
        for stage in (1, 2, 3):
            ckpt = out / f"stage{stage}.ckpt"
            step = common + ["--stage", str(stage), "--ckpt-out", str(ckpt)]
            if previous is not None:
                step += ["--ckpt-in", str(previous)]
            _run("train", step)
            previous = ckpt
        step = common + ["--ckpt", str(previous), "--baseline", args.baseline]
        if args.k_sweep:
            step += ["--k-sweep", args.k_sweep]
        _run("eval", step)
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="musubi", description="Dense 3D grounding on a synthetic scene world")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in _COMMANDS.items():
        sub.add_parser(name, help=help_text, add_help=False)
    sub.add_parser("pipeline", help="Run every step end to end", add_help=False)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] in _COMMANDS:
        return _COMMANDS[argv[0]][0](argv[1:])
    if argv and argv[0] == "pipeline":
        return pipeline_main(argv[1:])
    _build_parser().parse_args(argv)
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
