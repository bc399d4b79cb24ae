"""Procedural multimodal world with exact oracles.

Every sample pairs a speech stream (words from a seeded lexicon separated by
SILENCE) with an independent background stream (event segments whose
boundaries fall on video frames). Video frames are noisy copies of a seeded
per-event vector, semantic ids fuse the two streams and the acoustic grid is
the digit code of the semantic ids.
"""

import functools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import chi2_contingency

from .api_models import VocabSpec, WorldConfig
from .errors import ConfigError, InputError, UsageError
from .records import RecordReader, RecordWriter
from .tokenspace import (
    SILENCE,
    AcousticTokenGrid,
    SemanticTokenSequence,
    SpeechTokenSequence,
    VideoFeatureSequence,
    acoustic_permutation,
    encode_acoustic,
    fuse_streams,
    split_stream,
)

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"BVSDATA\x00"
DATASET_VERSION = 1

_LEXICON_STREAM = 0x1E
_EVENT_STREAM = 0xE7


@dataclass(frozen=True)
class Lexicon:
    """Distinct phoneme strings; id ``len(words)`` is reserved for UNK."""

    words: tuple[tuple[int, ...], ...]

    @functools.cached_property
    def _index(self) -> dict[tuple[int, ...], int]:
        return {phonemes: word_id for word_id, phonemes in enumerate(self.words)}

    @property
    def unk_id(self) -> int:
        return len(self.words)

    def lookup(self, phonemes: tuple[int, ...]) -> int:
        return self._index.get(phonemes, self.unk_id)

    @staticmethod
    def name(word_id: int) -> str:
        return f"w{word_id:02d}"

    def id_for_name(self, name: str) -> int | None:
        if len(name) < 2 or name[0] != "w" or not name[1:].isdigit():
            return None
        word_id = int(name[1:])
        return word_id if word_id < len(self.words) else None


@dataclass(frozen=True)
class World:
    """Seeded lexicon, event vector table and optional acoustic scrambling."""

    config: WorldConfig
    lexicon: Lexicon
    event_table: np.ndarray
    permutation: np.ndarray | None


@functools.cache
def build_world(config: WorldConfig) -> World:
    """Lexicon and event table drawn once from the master seed."""
    rng = np.random.default_rng([config.master_seed, _LEXICON_STREAM])
    seen: set[tuple[int, ...]] = set()
    words: list[tuple[int, ...]] = []
    phonemes = config.vocab.speech_vocab_size - 1
    while len(words) < config.lexicon_size:
        length = int(rng.integers(config.min_word_length, config.max_word_length + 1))
        word = tuple(int(p) for p in rng.integers(1, phonemes + 1, size=length))
        if word not in seen:
            seen.add(word)
            words.append(word)
    event_rng = np.random.default_rng([config.master_seed, _EVENT_STREAM])
    event_table = event_rng.standard_normal((config.vocab.background_vocab_size, config.video_dim))
    permutation = (
        acoustic_permutation(config.vocab, config.scramble_seed) if config.scramble_acoustic else None
    )
    return World(config, Lexicon(tuple(words)), event_table, permutation)


@dataclass(frozen=True, eq=False)
class WorldSample:
    """One paired sample of every modality."""

    video: VideoFeatureSequence
    speech: SpeechTokenSequence
    background: np.ndarray
    semantic: SemanticTokenSequence
    acoustic: AcousticTokenGrid
    transcript: tuple[int, ...]
    event_onsets: tuple[int, ...]

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, WorldSample)
            and self.video == other.video
            and self.speech == other.speech
            and np.array_equal(self.background, other.background)
            and self.semantic == other.semantic
            and self.acoustic == other.acoustic
            and self.transcript == other.transcript
            and self.event_onsets == other.event_onsets
        )


def sample_seed(master_seed: int, index: int) -> int:
    """Order-independent seed of sample ``index``."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, np.uint64)[0])


def _place_speech(
    config: WorldConfig, lexicon: Lexicon, rng: np.random.Generator, num_words: int | None
) -> tuple[np.ndarray, list[int]]:
    count = (
        int(rng.integers(config.min_words, config.max_words + 1)) if num_words is None else num_words
    )
    speech = np.full(config.semantic_length, SILENCE, dtype=np.int64)
    if count == 0:
        return speech, []
    word_ids = [int(w) for w in rng.integers(0, len(lexicon.words), size=count)]
    spans = [len(lexicon.words[w]) for w in word_ids]
    slack = config.semantic_length - sum(spans) - (count - 1) * config.min_word_gap
    if slack < 0:
        raise InputError(f"{count} words do not fit in {config.semantic_length} tokens")
    extra = rng.multinomial(slack, np.full(count + 1, 1.0 / (count + 1)))
    cursor = int(extra[0])
    for i, word_id in enumerate(word_ids):
        word = lexicon.words[word_id]
        speech[cursor : cursor + len(word)] = word
        cursor += len(word) + config.min_word_gap + int(extra[i + 1])
    return speech, word_ids


def _place_background(config: WorldConfig, rng: np.random.Generator) -> tuple[np.ndarray, list[int]]:
    events = config.vocab.background_vocab_size
    segments = int(rng.integers(config.min_segments, config.max_segments + 1))
    onsets = sorted(int(b) for b in rng.choice(np.arange(1, config.video_length), segments - 1, replace=False))
    frame_events = np.empty(config.video_length, dtype=np.int64)
    event = int(rng.integers(0, events))
    start = 0
    for onset in [*onsets, config.video_length]:
        frame_events[start:onset] = event
        event = (event + 1 + int(rng.integers(0, events - 1))) % events if events > 1 else event
        start = onset
    return frame_events, onsets


def gen_sample(config: WorldConfig, seed: int, num_words: int | None = None) -> WorldSample:
    """Generate one sample deterministically from ``(config, seed)``.

    Speech and background draw from independent child streams, so speech
    placement never depends on background events.
    """
    world = build_world(config)
    speech_rng, background_rng, noise_rng = (
        np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(3)
    )
    speech, _ = _place_speech(config, world.lexicon, speech_rng, num_words)
    frame_events, onsets = _place_background(config, background_rng)
    background = np.repeat(frame_events, config.ratio)
    noise = noise_rng.normal(0.0, config.video_noise_sigma, size=(config.video_length, config.video_dim))
    video = VideoFeatureSequence((world.event_table[frame_events] + noise).astype(np.float32), config.ratio)
    semantic = fuse_streams(speech, background, config.vocab)
    speech_seq = SpeechTokenSequence(speech, config.token_rate)
    return WorldSample(
        video=video,
        speech=speech_seq,
        background=background,
        semantic=SemanticTokenSequence(semantic.tokens, config.token_rate),
        acoustic=encode_acoustic(semantic, config.vocab, world.permutation),
        transcript=tuple(oracle_transcribe(speech_seq, world.lexicon)),
        event_onsets=tuple(onsets),
    )


def oracle_speech_extract(semantic: SemanticTokenSequence, vocab: VocabSpec) -> SpeechTokenSequence:
    """Speech component of every semantic id (the frozen speech-token extractor)."""
    speech, _ = split_stream(semantic, vocab)
    return SpeechTokenSequence(speech, semantic.rate)


def oracle_transcribe(speech: SpeechTokenSequence, lexicon: Lexicon) -> list[int]:
    """Map every maximal phoneme run to its lexicon word, or to UNK."""
    transcript: list[int] = []
    run: list[int] = []
    for token in [*speech.tokens.tolist(), SILENCE]:
        if token != SILENCE:
            run.append(token)
        elif run:
            transcript.append(lexicon.lookup(tuple(run)))
            run = []
    return transcript


def extract_event_onsets(background: np.ndarray, ratio: int = 1) -> list[int]:
    """Indices where the background id changes, position 0 excluded.

    With ``ratio=1`` the indices are semantic frames; a larger ratio converts
    them to video frames.
    """
    ids = np.asarray(background).reshape(-1)
    changes = np.flatnonzero(ids[1:] != ids[:-1]) + 1
    return [int(c) // ratio for c in changes]


def text_to_speech_tokens(words: list[str], world: World) -> SpeechTokenSequence:
    """Left-aligned speech stream for a transcript of word names.

    Words follow ``tts_leading_silence`` SILENCE tokens and are separated by
    ``min_word_gap`` SILENCE tokens.
    """
    config = world.config
    unknown = [w for w in words if world.lexicon.id_for_name(w) is None]
    if unknown:
        raise InputError(f"words outside the lexicon: {', '.join(unknown)}", {"words": unknown})
    speech = np.full(config.semantic_length, SILENCE, dtype=np.int64)
    cursor = config.tts_leading_silence
    for name in words:
        phonemes = world.lexicon.words[world.lexicon.id_for_name(name)]
        if cursor + len(phonemes) > config.semantic_length:
            raise InputError(f"transcript does not fit in {config.semantic_length} tokens")
        speech[cursor : cursor + len(phonemes)] = phonemes
        cursor += len(phonemes) + config.min_word_gap
    return SpeechTokenSequence(speech, config.token_rate)


# Persistence


@dataclass
class Dataset:
    """Manifest plus samples of a dataset file."""

    config: WorldConfig
    master_seed: int
    config_hash: str
    samples: list[WorldSample]
    start: int = 0

    def __len__(self) -> int:
        return len(self.samples)


def _indexed_sample(args: tuple[WorldConfig, int]) -> WorldSample:
    config, index = args
    return gen_sample(config, sample_seed(config.master_seed, index))


def generate_samples(config: WorldConfig, indices: range, workers: int = 1) -> list[WorldSample]:
    """Samples at ``indices``; identical for every worker count."""
    jobs = [(config, index) for index in indices]
    if workers <= 1:
        return [_indexed_sample(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_indexed_sample, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def independence_pvalue(samples: list[WorldSample], vocab: VocabSpec) -> float | None:
    """Chi-square p-value of speech activity vs. background event over all positions."""
    table = np.zeros((2, vocab.background_vocab_size), dtype=np.int64)
    for sample in samples:
        speaking = (sample.speech.tokens != SILENCE).astype(np.int64)
        np.add.at(table, (speaking, sample.background), 1)
    table = table[:, table.sum(axis=0) > 0]
    if table.shape[1] < 2 or (table.sum(axis=1) == 0).any():
        return None
    return float(chi2_contingency(table).pvalue)


def _write_sample(writer: RecordWriter, sample: WorldSample) -> None:
    writer.f32_list(sample.video.frames)
    writer.u32_list(sample.speech.tokens)
    writer.u32_list(sample.background)
    writer.u32_list(sample.semantic.tokens)
    for layer in sample.acoustic.layers:
        writer.u32_list(layer)
    writer.u32_list(sample.transcript)
    writer.u32_list(sample.event_onsets)


def _read_sample(reader: RecordReader, config: WorldConfig) -> WorldSample:
    frames = reader.f32_list().reshape(config.video_length, config.video_dim)
    speech = reader.u32_list()
    background = reader.u32_list()
    semantic = reader.u32_list()
    layers = np.stack([reader.u32_list() for _ in range(config.vocab.acoustic_layers)])
    transcript = tuple(int(w) for w in reader.u32_list())
    onsets = tuple(int(o) for o in reader.u32_list())
    return WorldSample(
        video=VideoFeatureSequence(frames, config.ratio),
        speech=SpeechTokenSequence(speech, config.token_rate),
        background=background,
        semantic=SemanticTokenSequence(semantic, config.token_rate),
        acoustic=AcousticTokenGrid(layers),
        transcript=transcript,
        event_onsets=onsets,
    )


def gen_dataset(
    config: WorldConfig,
    n: int,
    path: str | Path,
    workers: int = 1,
    config_hash: str = "",
    start: int = 0,
) -> Dataset:
    """Generate samples ``start .. start + n - 1`` and persist them with a manifest record.

    Disjoint index ranges of one world give disjoint train and held-out splits.
    """
    if n < 1:
        raise UsageError(f"dataset size must be at least 1, got {n}")
    if start < 0:
        raise UsageError(f"start index must be non-negative, got {start}")
    samples = generate_samples(config, range(start, start + n), workers)
    pvalue = independence_pvalue(samples, config.vocab)
    if pvalue is not None and pvalue < 1e-3:
        logger.warning("speech/background independence check p=%.2e", pvalue)
    else:
        logger.debug("speech/background independence check p=%s", pvalue)
    writer = RecordWriter(DATASET_MAGIC, DATASET_VERSION)
    manifest = {
        "format_version": DATASET_VERSION,
        "config": config.model_dump(mode="json"),
        "n": n,
        "master_seed": config.master_seed,
        "config_hash": config_hash,
        "start": start,
    }
    writer.text(json.dumps(manifest, sort_keys=True))
    for sample in samples:
        _write_sample(writer, sample)
    size = writer.write(path)
    logger.info("wrote %d samples to %s (%d bytes)", n, path, size)
    return Dataset(config, config.master_seed, config_hash, samples, start)


def load_dataset(path: str | Path, expected: WorldConfig | None = None) -> Dataset:
    """Read a dataset file; ``expected`` must match the manifest's world config."""
    reader = RecordReader(path, DATASET_MAGIC, "dataset")
    manifest = json.loads(reader.text())
    config = WorldConfig.model_validate(manifest["config"])
    if expected is not None and config != expected:
        raise ConfigError(f"dataset {path} was generated with a different world config")
    samples = [_read_sample(reader, config) for _ in range(manifest["n"])]
    return Dataset(
        config, manifest["master_seed"], manifest.get("config_hash", ""), samples, manifest.get("start", 0)
    )
