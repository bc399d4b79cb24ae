"""Pipeline commands shared by the CLI and the MCP server.

Each command takes a validated :class:`RunConfig`, does its work and returns a
pydantic summary.
"""

import json
import logging
from pathlib import Path

import numpy as np
import torch
from tqdm import tqdm

from .api_models import (
    DatasetSummary,
    EvalReport,
    GenerateMode,
    GenerationSummary,
    RunConfig,
    Stage,
    TrainLogRecord,
    TrainSummary,
)
from .config import config_hash
from .errors import BVSError, ConfigError, InputError, NumericError, UsageError
from .evalkit import GeneratedItem, evaluate
from .nncore import OptimizerState, load_checkpoint, save_checkpoint
from .records import RecordReader, RecordWriter
from .single import collate_single, init_single, semantic_from_grid
from .synthworld import (
    Dataset,
    build_world,
    gen_dataset,
    load_dataset,
    oracle_speech_extract,
    sample_seed,
    text_to_speech_tokens,
)
from .v2as import V2ASModel, collate_v2as, init_v2as, v2as_generate, v2as_train_step
from .vs2a import VS2ABundle, collate_vs2a, init_vs2a, vs2a_generate, vs2a_train_step

logger = logging.getLogger(__name__)

GENERATION_MAGIC = b"BVSGEN\x00\x00"
GENERATION_VERSION = 1


def log_path_for(checkpoint: str | Path) -> Path:
    return Path(f"{checkpoint}.log.jsonl")


# gen-data


def cmd_gen_data(
    config: RunConfig, n: int, out_path: str | Path, workers: int = 1, start: int = 0
) -> DatasetSummary:
    """Generate ``n`` samples of the configured world, beginning at sample index ``start``."""
    if n < 1:
        raise UsageError(f"-n must be at least 1, got {n}")
    digest = config_hash(config)
    gen_dataset(config.world, n, out_path, workers=workers, config_hash=digest, start=start)
    return DatasetSummary(
        path=str(out_path),
        num_samples=n,
        start=start,
        master_seed=config.world.master_seed,
        config_hash=digest,
    )


# train


def _build_stage(stage: Stage, config: RunConfig) -> V2ASModel | VS2ABundle:
    if stage is Stage.V2AS:
        return init_v2as(config.world, config.v2as, config.train.seed)
    if stage is Stage.SINGLE:
        return init_single(config.world, config.single_first, config.single_rest, config.train.seed)
    return init_vs2a(config.world, config.vs2a_first, config.vs2a_rest, config.train.seed)


def _step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(sample_seed(seed, step))


def _replay_log(path: Path, upto: int) -> None:
    """Drop log records past ``upto`` so a resumed run appends to a consistent log."""
    if not path.exists():
        return
    kept = [
        line
        for line in path.read_text(encoding="utf-8").splitlines()
        if line and json.loads(line)["step"] <= upto
    ]
    path.write_text("".join(f"{line}\n" for line in kept), encoding="utf-8")


def cmd_train(
    stage: Stage | str,
    config: RunConfig,
    dataset_path: str | Path,
    out_checkpoint: str | Path,
    resume: bool = False,
) -> TrainSummary:
    """Train one stage, writing periodic and final checkpoints plus a JSON-lines log.

    With ``resume`` the run continues from ``out_checkpoint`` and reproduces
    the uninterrupted run exactly.
    """
    stage = Stage(stage)
    train = config.train
    torch.set_num_threads(train.num_threads)
    dataset = load_dataset(dataset_path, expected=config.world)
    model = _build_stage(stage, config)
    state = OptimizerState(model, config.optimizer)
    stage_config = config.stage_config(stage)
    log_path = log_path_for(out_checkpoint)
    meta = {
        "stage": stage.value,
        "seed": train.seed,
        "config_hash": config_hash(config),
        "disable_speech_condition": train.disable_speech_condition,
    }

    start = 0
    if resume and Path(out_checkpoint).exists():
        checkpoint = load_checkpoint(out_checkpoint, model, state, stage_config)
        if checkpoint.meta.get("seed") != train.seed:
            raise ConfigError(f"checkpoint {out_checkpoint} was trained with another seed")
        start = state.step
        _replay_log(log_path, start)
        logger.info("resuming %s from step %d", stage.value, start)
    else:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("", encoding="utf-8")

    if stage is Stage.V2AS:
        examples = collate_v2as(dataset.samples)
    elif stage is Stage.SINGLE:
        examples = collate_single(dataset.samples)
    else:
        examples = collate_vs2a(dataset.samples)
    schedule = config.decode_v2as.schedule if stage is Stage.V2AS else config.decode_vs2a.schedule

    final_loss = None
    steps = range(start, train.max_steps)
    for step in tqdm(steps, desc=f"train {stage.value}", disable=not train.progress):
        generator = _step_generator(train.seed, step)
        indices = torch.randint(len(examples), (train.batch_size,), generator=generator)
        batch = examples.select(indices)
        try:
            if stage is Stage.V2AS:
                report = v2as_train_step(
                    model, state, batch, generator, schedule, train.disable_speech_condition
                )
                record = TrainLogRecord(
                    step=step + 1,
                    loss=report.loss,
                    learning_rate=report.learning_rate,
                    masked_accuracy=report.masked.accuracy,
                    speech_accuracy=report.speech_accuracy,
                    background_accuracy=report.background_accuracy,
                    degenerate=report.masked.degenerate,
                )
            else:
                report = vs2a_train_step(model, state, batch, generator, schedule)
                record = TrainLogRecord(
                    step=step + 1,
                    loss=report.loss,
                    learning_rate=report.learning_rate,
                    masked_accuracy=report.masked_accuracy,
                    layer_losses=report.layer_losses,
                    layer_accuracies=report.layer_accuracies,
                    degenerate=report.degenerate,
                )
        except NumericError as e:
            save_checkpoint(f"{out_checkpoint}.failed", model, state, stage_config, meta)
            raise NumericError(
                f"step {step + 1} of {stage.value} training: {e.message}",
                {"step": step + 1, "dump": f"{out_checkpoint}.failed"},
            ) from e
        final_loss = report.loss
        done = step + 1
        if done % train.log_every == 0 or done == train.max_steps:
            with log_path.open("a", encoding="utf-8") as log:
                log.write(record.model_dump_json() + "\n")
            logger.info("%s step %d loss %.4f acc %.3f", stage.value, done, record.loss, record.masked_accuracy)
        if done % train.checkpoint_every == 0 and done != train.max_steps:
            save_checkpoint(out_checkpoint, model, state, stage_config, meta)

    save_checkpoint(out_checkpoint, model, state, stage_config, meta)
    return TrainSummary(
        stage=stage,
        steps=state.step,
        final_loss=final_loss,
        checkpoint=str(out_checkpoint),
        log_path=str(log_path),
        resumed_from_step=start,
    )


# generate


def load_stage(stage: Stage, config: RunConfig, path: str | Path) -> tuple[V2ASModel | VS2ABundle, dict]:
    """Rebuild a stage from its checkpoint; the stored config must match ``config``."""
    if stage is Stage.V2AS:
        model = V2ASModel(config.world, config.v2as)
    elif stage is Stage.SINGLE:
        model = VS2ABundle(config.world, config.single_first, config.single_rest)
    else:
        model = VS2ABundle(config.world, config.vs2a_first, config.vs2a_rest)
    checkpoint = load_checkpoint(path, model, None, config.stage_config(stage))
    model.eval()
    return model, checkpoint.meta


def read_transcripts(path: str | Path) -> list[list[str]]:
    """One transcript per line, words separated by whitespace; blank lines are empty transcripts."""
    try:
        return [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    except OSError as e:
        raise InputError(f"cannot read transcripts {path}: {e}") from e


def _speech_conditions(
    mode: GenerateMode,
    config: RunConfig,
    video: Dataset,
    source: Dataset | None,
    transcripts: list[list[str]] | None,
) -> np.ndarray:
    world = build_world(config.world)
    match mode:
        case GenerateMode.SPEECH:
            return np.stack([s.speech.tokens for s in video.samples])
        case GenerateMode.TRANSCRIPT:
            if transcripts is None:
                transcripts = [[world.lexicon.name(w) for w in s.transcript] for s in video.samples]
            if len(transcripts) != len(video):
                raise InputError(f"{len(transcripts)} transcripts for {len(video)} videos")
            return np.stack([text_to_speech_tokens(words, world).tokens for words in transcripts])
        case GenerateMode.AUDIO:
            if source is None:
                raise UsageError("audio mode needs a source dataset")
            if len(source) != len(video):
                raise InputError(f"{len(source)} source samples for {len(video)} videos")
            return np.stack([oracle_speech_extract(s.semantic, config.world.vocab).tokens for s in source.samples])
    raise UsageError(f"mode {mode} takes no speech condition")


def _stage_one(
    mode: GenerateMode,
    config: RunConfig,
    v2as_checkpoint: str | Path | None,
    video: Dataset,
    source: Dataset | None,
    transcripts: list[list[str]] | None,
    frames: torch.Tensor,
    generator: torch.Generator,
) -> torch.Tensor:
    """Semantic tokens for stage 2: decoded by V2AS, or the references when reconstructing."""
    if mode is GenerateMode.RECONSTRUCT:
        return torch.from_numpy(np.stack([s.semantic.tokens for s in video.samples]))
    if v2as_checkpoint is None:
        raise UsageError(f"{mode.value} mode needs a v2as checkpoint")
    v2as, meta = load_stage(Stage.V2AS, config, v2as_checkpoint)
    speech = torch.from_numpy(_speech_conditions(mode, config, video, source, transcripts))
    disable_speech = bool(meta.get("disable_speech_condition", False))
    chunk = config.train.batch_size
    return torch.cat(
        [
            v2as_generate(
                v2as,
                frames[i : i + chunk],
                speech[i : i + chunk],
                config.decode_v2as,
                generator,
                disable_speech,
            )
            for i in range(0, len(video), chunk)
        ]
    )


def cmd_generate(
    config: RunConfig,
    v2as_checkpoint: str | Path | None,
    vs2a_checkpoint: str | Path,
    video_dataset: str | Path,
    out_path: str | Path,
    mode: GenerateMode | str = GenerateMode.SPEECH,
    source_dataset: str | Path | None = None,
    transcripts: list[list[str]] | None = None,
    seed: int | None = None,
    workers: int | None = None,
) -> GenerationSummary:
    """Run the two stages over every video of ``video_dataset``.

    ``mode`` picks the speech condition: the sample's own speech, a transcript
    through the text-to-speech-token oracle, the speech of a paired source
    sample, or (``reconstruct``) no stage 1 at all, feeding the reference
    semantic stream to stage 2. In ``single`` mode ``vs2a_checkpoint`` names a
    single-stage checkpoint that turns each sample's own speech and video into
    the grid directly; the stored semantic ids are read back off that grid.

    ``workers`` sets the torch threads used for decoding (``train.num_threads``
    when omitted).
    """
    mode = GenerateMode(mode)
    seed = config.seed if seed is None else seed
    if workers is not None and workers < 1:
        raise UsageError(f"workers must be at least 1, got {workers}")
    torch.set_num_threads(config.train.num_threads if workers is None else workers)
    video = load_dataset(video_dataset, expected=config.world)
    source = load_dataset(source_dataset, expected=config.world) if source_dataset else None
    frames = torch.from_numpy(np.stack([s.video.frames for s in video.samples]))
    generator = torch.Generator().manual_seed(seed)
    chunk = config.train.batch_size

    non_image = 0
    if mode is GenerateMode.SINGLE:
        single, _ = load_stage(Stage.SINGLE, config, vs2a_checkpoint)
        speech = torch.from_numpy(_speech_conditions(GenerateMode.SPEECH, config, video, source, None))
        acoustic = torch.cat(
            [
                vs2a_generate(single, speech[i : i + chunk], frames[i : i + chunk], config.decode_vs2a, generator)
                for i in range(0, len(video), chunk)
            ]
        )
        semantic, non_image = semantic_from_grid(acoustic, config.world, build_world(config.world).permutation)
    else:
        semantic = _stage_one(mode, config, v2as_checkpoint, video, source, transcripts, frames, generator)
        bundle, _ = load_stage(Stage.VS2A, config, vs2a_checkpoint)
        acoustic = torch.cat(
            [
                vs2a_generate(bundle, semantic[i : i + chunk], frames[i : i + chunk], config.decode_vs2a, generator)
                for i in range(0, len(video), chunk)
            ]
        )

    writer = RecordWriter(GENERATION_MAGIC, GENERATION_VERSION)
    manifest = {
        "mode": mode.value,
        "n": len(video),
        "seed": seed,
        "config_hash": config_hash(config),
        "video_dataset": str(video_dataset),
        "source_dataset": None if source is None else str(source_dataset),
    }
    writer.text(json.dumps(manifest, sort_keys=True))
    for index in range(len(video)):
        writer.u32_list(semantic[index].numpy())
        for layer in acoustic[index].numpy():
            writer.u32_list(layer)
        writer.u8(source is not None)
        if source is not None:
            writer.u32_list(source.samples[index].semantic.tokens)
    writer.write(out_path)
    logger.info("wrote %d generations to %s", len(video), out_path)
    return GenerationSummary(
        path=str(out_path), num_outputs=len(video), mode=mode, seed=seed, non_image_columns=non_image
    )


def read_generation(path: str | Path, config: RunConfig) -> tuple[dict, list[GeneratedItem]]:
    """Manifest and records of a generation file."""
    reader = RecordReader(path, GENERATION_MAGIC, "generation")
    manifest = json.loads(reader.text())
    layers = config.world.vocab.acoustic_layers
    items = []
    for _ in range(manifest["n"]):
        semantic = reader.u32_list()
        acoustic = np.stack([reader.u32_list() for _ in range(layers)])
        source = reader.u32_list() if reader.u8() else None
        items.append(GeneratedItem(semantic, acoustic, source))
    return manifest, items


# eval


def cmd_eval(
    config: RunConfig,
    generated_path: str | Path,
    reference_dataset: str | Path,
    report_path: str | Path,
    workers: int = 1,
) -> EvalReport:
    """Score a generation file against its reference dataset and write the report as JSON."""
    _, items = read_generation(generated_path, config)
    references = load_dataset(reference_dataset, expected=config.world)
    report = evaluate(items, references.samples, config.world, config.eval, config_hash(config), workers)
    target = Path(report_path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise BVSError(f"cannot write report {report_path}: {e}") from e
    for metric in report.metrics:
        logger.info("%s = %.6f (n=%d)", metric.name, metric.value, metric.sample_count)
    return report
