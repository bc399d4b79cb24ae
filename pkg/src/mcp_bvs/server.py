"""FastMCP server exposing the BVS pipeline."""

import asyncio
import os
from importlib.resources import files
from typing import Any

from dotenv import load_dotenv
from fastmcp import Context, FastMCP
from starlette.requests import Request
from starlette.responses import JSONResponse

from .api_models import (
    DatasetSummary,
    EvalReport,
    GenerateMode,
    GenerationSummary,
    RunConfig,
    Stage,
    TrainSummary,
)
from .config import flatten, load_config, with_overrides
from .errors import BVSError
from .pipeline import cmd_eval, cmd_gen_data, cmd_generate, cmd_train

# Load environment variables from .env file
load_dotenv()

mcp = FastMCP(
    "BVS",
    instructions=(
        "Before using BVS tools, read the skill://bvs/usage resource "
        "for the order of pipeline steps and the generation modes."
    ),
)

SKILL_CONTENT = files("mcp_bvs").joinpath("SKILL.md").read_text()


@mcp.resource("skill://bvs/usage")
def bvs_skill() -> str:
    """How to run the pipeline: data, training of both stages, generation, evaluation."""
    return SKILL_CONTENT


_config: RunConfig | None = None


def get_config() -> RunConfig:
    """Get or load the run config named by ``BVS_CONFIG`` (defaults when unset)."""
    global _config
    if _config is None:
        _config = load_config(os.environ.get("BVS_CONFIG") or None)
    return _config


async def _report(ctx: Context | None, what: str, error: BVSError) -> None:
    if ctx:
        await ctx.error(f"{what} error: {error.message}")


@mcp.custom_route("/health", methods=["GET"])
async def health_check(request: Request) -> JSONResponse:
    """Health check endpoint for monitoring."""
    return JSONResponse({"status": "healthy", "service": "mcp-bvs"})


@mcp.tool()
async def generate_dataset(
    n: int,
    out_path: str,
    seed: int | None = None,
    workers: int = 1,
    start: int = 0,
    ctx: Context | None = None,
) -> DatasetSummary:
    """Generate a synthetic dataset of paired video, speech and token samples.

    Args:
        n: Number of samples (at least 1)
        out_path: Dataset file to write
        seed: World master seed (config value when omitted)
        workers: Worker processes; results do not depend on it
        start: Index of the first sample; disjoint ranges give held-out splits
        ctx: MCP context

    Returns:
        Dataset summary with the config hash
    """
    try:
        config = get_config()
        if seed is not None:
            config = with_overrides(config, {"world.master_seed": seed})
        return await asyncio.to_thread(cmd_gen_data, config, n, out_path, workers, start)
    except BVSError as e:
        await _report(ctx, "Dataset", e)
        raise


@mcp.tool()
async def train_stage(
    stage: Stage,
    dataset_path: str,
    out_checkpoint: str,
    steps: int | None = None,
    resume: bool = False,
    ctx: Context | None = None,
) -> TrainSummary:
    """Train the v2as, vs2a or single stage.

    Args:
        stage: "v2as" (video+speech to semantic), "vs2a" (semantic+video to acoustic)
            or "single" (video+speech straight to acoustic, the ablation without semantic tokens)
        dataset_path: Training dataset
        out_checkpoint: Checkpoint to write; the log goes to <checkpoint>.log.jsonl
        steps: Optimizer steps (config value when omitted)
        resume: Continue from out_checkpoint when it exists
        ctx: MCP context

    Returns:
        Training summary
    """
    try:
        config = get_config()
        if steps is not None:
            config = with_overrides(config, {"train.max_steps": steps})
        return await asyncio.to_thread(cmd_train, stage, config, dataset_path, out_checkpoint, resume)
    except BVSError as e:
        await _report(ctx, "Training", e)
        raise


@mcp.tool()
async def generate_tokens(
    vs2a_checkpoint: str,
    video_dataset: str,
    out_path: str,
    mode: GenerateMode = GenerateMode.SPEECH,
    v2as_checkpoint: str | None = None,
    source_dataset: str | None = None,
    transcripts: list[list[str]] | None = None,
    steps: int | None = None,
    cfg_scale: float | None = None,
    workers: int | None = None,
    ctx: Context | None = None,
) -> GenerationSummary:
    """Generate semantic and acoustic tokens for every video of a dataset.

    Args:
        vs2a_checkpoint: Stage-2 checkpoint (the single-stage one in single mode)
        video_dataset: Dataset whose videos condition generation
        out_path: Generation file to write
        mode: speech, transcript, audio, reconstruct or single
        v2as_checkpoint: Stage-1 checkpoint (all modes but reconstruct and single)
        source_dataset: Source of speech in audio mode
        transcripts: Word names per video in transcript mode (e.g. [["w03", "w17"], []])
        steps: V2AS decoding steps
        cfg_scale: V2AS guidance scale
        workers: Decoding threads (train.num_threads when omitted)
        ctx: MCP context

    Returns:
        Generation summary
    """
    try:
        overrides: dict[str, Any] = {}
        if steps is not None:
            overrides["decode_v2as.steps"] = steps
        if cfg_scale is not None:
            overrides["decode_v2as.cfg_scale"] = cfg_scale
        config = with_overrides(get_config(), overrides)
        return await asyncio.to_thread(
            cmd_generate,
            config,
            v2as_checkpoint,
            vs2a_checkpoint,
            video_dataset,
            out_path,
            mode,
            source_dataset,
            transcripts,
            workers=workers,
        )
    except BVSError as e:
        await _report(ctx, "Generation", e)
        raise


@mcp.tool()
async def evaluate_generation(
    generated_path: str,
    reference_dataset: str,
    report_path: str,
    ctx: Context | None = None,
) -> EvalReport:
    """Score generations: WER, delta-WER, FAD, LPAPS proxy, desync and acoustic consistency.

    Args:
        generated_path: Generation file
        reference_dataset: Dataset the generations are paired with, by index
        report_path: JSON report to write
        ctx: MCP context

    Returns:
        Evaluation report
    """
    try:
        return await asyncio.to_thread(cmd_eval, get_config(), generated_path, reference_dataset, report_path)
    except BVSError as e:
        await _report(ctx, "Evaluation", e)
        raise


@mcp.tool()
async def describe_config() -> dict[str, Any]:
    """Current run config as dotted keys."""
    return flatten(get_config())


# Create ASGI application for deployment
app = mcp.http_app()

# Stdio entrypoint
if __name__ == "__main__":
    mcp.run()
