"""``bvs`` command line: gen-data, train, generate, eval.

Exit codes: 0 on success, 2 on usage errors, 1 on any other pipeline error.
"""

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from pydantic import BaseModel

from .api_models import GenerateMode, RunConfig, Stage
from .config import load_config, with_overrides
from .errors import BVSError, UsageError
from .pipeline import cmd_eval, cmd_gen_data, cmd_generate, cmd_train, read_transcripts

logger = logging.getLogger(__name__)

_DEFAULTS = RunConfig()


def _steps_list(raw: str) -> list[int]:
    try:
        return [int(part) for part in raw.replace("[", "").replace("]", "").split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}") from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file (defaults when omitted)")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="bvs",
        description="Two-stage masked generative token pipeline on a synthetic world.",
    )
    verbs = parser.add_subparsers(dest="verb", required=True)

    gen = verbs.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    gen.add_argument("-n", type=int, required=True, help="number of samples")
    gen.add_argument("--out", type=Path, required=True, help="dataset file to write")
    gen.add_argument("--seed", type=int, help="world master seed")
    gen.add_argument("--start", type=int, default=0, help="index of the first sample (default: 0)")
    gen.add_argument("--workers", type=int, default=1, help="worker processes (default: 1)")

    train = verbs.add_parser("train", parents=[common], help="train one stage")
    train.add_argument("stage", choices=[s.value for s in Stage])
    train.add_argument("--data", type=Path, required=True, help="training dataset")
    train.add_argument("--out", type=Path, required=True, help="checkpoint to write")
    train.add_argument("--seed", type=int, help="training seed")
    train.add_argument(
        "--steps", type=int, help=f"optimizer steps (default: {_DEFAULTS.train.max_steps})"
    )
    train.add_argument("--resume", action="store_true", help="continue from --out if it exists")

    generate = verbs.add_parser("generate", parents=[common], help="run both stages")
    generate.add_argument(
        "--v2as", type=Path, help="stage-1 checkpoint (not needed to reconstruct or in single mode)"
    )
    generate.add_argument(
        "--vs2a", type=Path, required=True, help="stage-2 checkpoint (the single-stage one in single mode)"
    )
    generate.add_argument("--video", type=Path, required=True, help="dataset supplying the videos")
    generate.add_argument(
        "--mode",
        choices=[m.value for m in GenerateMode],
        default=GenerateMode.SPEECH.value,
        help="speech condition source (default: speech)",
    )
    generate.add_argument("--source", type=Path, help="source dataset for audio mode")
    generate.add_argument("--transcripts", type=Path, help="one transcript per line for transcript mode")
    generate.add_argument("--out", type=Path, required=True, help="generation file to write")
    generate.add_argument("--seed", type=int, help=f"sampling seed (default: {_DEFAULTS.seed})")
    generate.add_argument(
        "--steps", type=int, help=f"V2AS decoding steps (default: {_DEFAULTS.decode_v2as.steps})"
    )
    generate.add_argument(
        "--cfg-scale",
        type=float,
        help=f"V2AS guidance scale (default: {_DEFAULTS.decode_v2as.cfg_scale})",
    )
    generate.add_argument(
        "--vs2a-steps",
        type=_steps_list,
        help=f"VS2A steps per layer (default: {_DEFAULTS.decode_vs2a.steps_per_layer})",
    )
    generate.add_argument(
        "--vs2a-cfg-scale",
        type=float,
        help=f"VS2A guidance scale (default: {_DEFAULTS.decode_vs2a.cfg_scale})",
    )
    generate.add_argument(
        "--workers", type=int, help="decoding threads (default: train.num_threads from the config)"
    )

    evaluate = verbs.add_parser("eval", parents=[common], help="score generations")
    evaluate.add_argument("--generated", type=Path, required=True, help="generation file")
    evaluate.add_argument("--reference", type=Path, required=True, help="reference dataset")
    evaluate.add_argument("--out", type=Path, required=True, help="report file to write")
    evaluate.add_argument("--workers", type=int, default=1, help="worker processes (default: 1)")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    match args.verb:
        case "gen-data":
            if args.seed is not None:
                overrides["world.master_seed"] = args.seed
        case "train":
            if args.seed is not None:
                overrides["train.seed"] = args.seed
            if args.steps is not None:
                overrides["train.max_steps"] = args.steps
        case "generate":
            if args.seed is not None:
                overrides["seed"] = args.seed
            if args.steps is not None:
                overrides["decode_v2as.steps"] = args.steps
            if args.cfg_scale is not None:
                overrides["decode_v2as.cfg_scale"] = args.cfg_scale
            if args.vs2a_steps is not None:
                overrides["decode_vs2a.steps_per_layer"] = args.vs2a_steps
            if args.vs2a_cfg_scale is not None:
                overrides["decode_vs2a.cfg_scale"] = args.vs2a_cfg_scale
    return overrides


def run(args: argparse.Namespace) -> BaseModel:
    config = with_overrides(load_config(args.config), _overrides(args))
    match args.verb:
        case "gen-data":
            if args.workers < 1:
                raise UsageError("--workers must be at least 1")
            return cmd_gen_data(config, args.n, args.out, args.workers, args.start)
        case "train":
            return cmd_train(args.stage, config, args.data, args.out, resume=args.resume)
        case "generate":
            transcripts = read_transcripts(args.transcripts) if args.transcripts else None
            return cmd_generate(
                config,
                args.v2as,
                args.vs2a,
                args.video,
                args.out,
                mode=args.mode,
                source_dataset=args.source,
                transcripts=transcripts,
                workers=args.workers,
            )
        case "eval":
            if args.workers < 1:
                raise UsageError("--workers must be at least 1")
            return cmd_eval(config, args.generated, args.reference, args.out, args.workers)
    raise UsageError(f"unknown verb {args.verb}")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        summary = run(args)
    except BVSError as e:
        print(f"bvs: {e}", file=sys.stderr)
        return e.exit_code
    print(summary.model_dump_json(indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
