"""Token-level evaluation metrics.

Intelligibility (WER, delta-WER), set-level similarity (Fréchet distance over
pluggable embedders), paired perceptual distance and onset desynchronisation.
"""

import logging
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import editdistance
import numpy as np
from scipy import linalg

from .api_models import EvalConfig, EvalReport, MetricRecord, WorldConfig
from .errors import DomainError, InputError, NonImageCodeError, NumericError, ShapeError
from .synthworld import WorldSample, build_world, extract_event_onsets, oracle_transcribe
from .tokenspace import (
    AcousticTokenGrid,
    SemanticTokenSequence,
    SpeechTokenSequence,
    decode_acoustic,
    recombine_digits,
)

logger = logging.getLogger(__name__)

_HISTOGRAM_STREAM = 0x41
_FRAME_STREAM = 0x42


# Word error rate


def wer(reference: Sequence[int], hypothesis: Sequence[int]) -> float:
    """Unit-cost Levenshtein distance over ``max(1, len(reference))``."""
    return editdistance.eval(list(reference), list(hypothesis)) / max(1, len(reference))


def delta_wer(pairs: Sequence[tuple[float, float]]) -> float:
    """Mean absolute difference between ground-truth and generated WER."""
    if not pairs:
        raise DomainError("delta_wer needs at least one pair")
    return float(np.mean([abs(gt - pred) for gt, pred in pairs]))


# Embedders


class HistogramEmbedder:
    """Seeded random projection of a sequence's normalised token histogram."""

    def __init__(self, vocab_size: int, dim: int = 16, seed: int = 0) -> None:
        self.vocab_size = vocab_size
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng([seed, _HISTOGRAM_STREAM])
        self.projection = rng.standard_normal((vocab_size, dim))

    @property
    def embedder_id(self) -> str:
        return f"histogram-d{self.dim}-s{self.seed}"

    def __call__(self, tokens: np.ndarray) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        histogram = np.bincount(ids, minlength=self.vocab_size)[: self.vocab_size].astype(np.float64)
        return histogram / max(1, ids.size) @ self.projection


class FrameEmbedder:
    """Seeded lookup table mapping every token id to a vector."""

    def __init__(self, vocab_size: int, dim: int = 16, seed: int = 0) -> None:
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng([seed, _FRAME_STREAM])
        self.table = rng.standard_normal((vocab_size, dim))

    @property
    def embedder_id(self) -> str:
        return f"frame-d{self.dim}-s{self.seed}"

    def __call__(self, tokens: np.ndarray) -> np.ndarray:
        return self.table[np.asarray(tokens, dtype=np.int64).reshape(-1)]


# Fréchet distance


def _check_gaussian(mu: np.ndarray, cov: np.ndarray, what: str) -> None:
    if np.isnan(mu).any() or np.isnan(cov).any():
        raise NumericError(f"NaN in {what}")
    if cov.shape != (mu.size, mu.size):
        raise ShapeError(f"{what} covariance {cov.shape} does not match mean of size {mu.size}")
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-9 * max(1.0, float(np.abs(cov).max()))):
        raise NumericError(f"{what} covariance is not symmetric")


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance(mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray) -> float:
    """Fréchet distance between two Gaussians, clamped at 0."""
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, float)), np.atleast_2d(np.asarray(cov2, float))
    _check_gaussian(mu1, cov1, "first")
    _check_gaussian(mu2, cov2, "second")
    if mu1.shape != mu2.shape:
        raise ShapeError(f"mean dimensions differ: {mu1.size} vs {mu2.size}")
    # trace sqrt(cov1 cov2) == trace sqrt(s1 cov2 s1) for s1 = sqrt(cov1), and the latter is symmetric.
    root1 = _psd_sqrt(cov1)
    middle = root1 @ cov2 @ root1
    cross = float(np.sqrt(np.clip(linalg.eigh((middle + middle.T) / 2, eigvals_only=True), 0.0, None)).sum())
    diff = mu1 - mu2
    value = float(diff @ diff) + float(np.trace(cov1) + np.trace(cov2)) - 2.0 * cross
    return max(value, 0.0)


def fit_gaussian(
    embeddings: np.ndarray, shrinkage: bool = False, shrinkage_lambda: float = 1e-6
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and sample covariance of ``(n, dim)`` embeddings."""
    n, dim = embeddings.shape
    if n < dim + 1 and not shrinkage:
        raise DomainError(f"{n} samples cannot give a full-rank {dim}-dim covariance; enable shrinkage")
    mu = embeddings.mean(axis=0)
    cov = np.cov(embeddings, rowvar=False) if n > 1 else np.zeros((dim, dim))
    if shrinkage:
        cov = cov + shrinkage_lambda * np.eye(dim)
    return mu, cov


def fad(
    set_a: Sequence[np.ndarray],
    set_b: Sequence[np.ndarray],
    embedder: HistogramEmbedder,
    shrinkage: bool = False,
    shrinkage_lambda: float = 1e-6,
) -> float:
    """Fréchet distance between the embedded sets."""
    if not set_a or not set_b:
        raise DomainError("fad needs two non-empty sets")
    mu_a, cov_a = fit_gaussian(np.stack([embedder(s) for s in set_a]), shrinkage, shrinkage_lambda)
    mu_b, cov_b = fit_gaussian(np.stack([embedder(s) for s in set_b]), shrinkage, shrinkage_lambda)
    return frechet_distance(mu_a, cov_a, mu_b, cov_b)


def pair_distance(generated: np.ndarray, reference: np.ndarray, embedder: FrameEmbedder) -> float:
    """Mean per-frame Euclidean distance between two embedded sequences."""
    generated, reference = np.asarray(generated), np.asarray(reference)
    if generated.shape != reference.shape:
        raise ShapeError(f"paired sequences differ in length: {generated.size} vs {reference.size}")
    return float(np.linalg.norm(embedder(generated) - embedder(reference), axis=-1).mean())


def lpaps_proxy(pairs: Sequence[tuple[np.ndarray, np.ndarray]], embedder: FrameEmbedder) -> float:
    """Mean over pairs of :func:`pair_distance`."""
    if not pairs:
        raise DomainError("lpaps_proxy needs at least one pair")
    return float(np.mean([pair_distance(g, r, embedder) for g, r in pairs]))


# Temporal alignment


def desync_analog(gen_onsets: Sequence[int], gt_onsets: Sequence[int], max_offset: int = 25) -> float:
    """Mean onset error under greedy in-order matching.

    Onsets closer than ``max_offset`` are matched in order; every unmatched
    onset on either side costs ``max_offset``.
    """
    for name, onsets in (("generated", gen_onsets), ("reference", gt_onsets)):
        if any(b < a for a, b in zip(onsets, onsets[1:], strict=False)):
            raise DomainError(f"{name} onsets are not sorted")
    i = j = 0
    total = 0.0
    while i < len(gen_onsets) and j < len(gt_onsets):
        gap = gen_onsets[i] - gt_onsets[j]
        if abs(gap) <= max_offset:
            total += abs(gap)
            i += 1
            j += 1
        elif gap < 0:
            total += max_offset
            i += 1
        else:
            total += max_offset
            j += 1
    total += max_offset * ((len(gen_onsets) - i) + (len(gt_onsets) - j))
    return total / max(1, len(gen_onsets), len(gt_onsets))


# Report


@dataclass(frozen=True)
class GeneratedItem:
    """One generated record as evaluation reads it."""

    semantic: np.ndarray
    acoustic: np.ndarray | None = None
    source_semantic: np.ndarray | None = None


@dataclass(frozen=True)
class _SampleScores:
    wer_gt: float
    wer_pred: float
    empty_reference: bool
    desync: float
    lpaps: float
    lpaps_source: float | None
    consistency: float | None


def acoustic_consistency(acoustic: np.ndarray, semantic: np.ndarray, world: WorldConfig) -> float:
    """Fraction of positions whose decoded grid column equals the semantic id.

    Columns that spell a code outside the semantic vocabulary count as
    mismatches.
    """
    vocab = world.vocab
    grid = AcousticTokenGrid(acoustic)
    semantic = np.asarray(semantic)
    permutation = build_world(world).permutation
    try:
        return float((decode_acoustic(grid, vocab, permutation).tokens == semantic).mean())
    except NonImageCodeError as e:
        valid = recombine_digits(grid, vocab) < vocab.semantic_vocab_size
        logger.debug("%d of %d columns are non-image codes, first: %s", (~valid).sum(), valid.size, e)
    if not valid.any():
        return 0.0
    decoded = decode_acoustic(AcousticTokenGrid(grid.layers[:, valid]), vocab, permutation)
    return float((decoded.tokens == semantic[valid]).sum() / semantic.size)


def _score_sample(args: tuple[GeneratedItem, WorldSample, WorldConfig, EvalConfig]) -> _SampleScores:
    item, reference, world_config, config = args
    world = build_world(world_config)
    vocab = world_config.vocab
    frames = FrameEmbedder(vocab.semantic_vocab_size, config.embed_dim, config.embedder_seed)
    generated = SemanticTokenSequence(item.semantic, world_config.token_rate)
    speech, background = np.divmod(generated.tokens, vocab.background_vocab_size)
    hypothesis = oracle_transcribe(SpeechTokenSequence(speech), world.lexicon)
    # Ground-truth WER listens to the reference acoustic grid, not its speech stream.
    heard = decode_acoustic(reference.acoustic, vocab, world.permutation).tokens
    heard_words = oracle_transcribe(SpeechTokenSequence(heard // vocab.background_vocab_size), world.lexicon)
    transcript = list(reference.transcript)
    return _SampleScores(
        wer_gt=wer(transcript, heard_words),
        wer_pred=wer(transcript, hypothesis),
        empty_reference=not transcript,
        desync=desync_analog(
            extract_event_onsets(background), extract_event_onsets(reference.background), config.max_offset
        ),
        lpaps=pair_distance(generated.tokens, reference.semantic.tokens, frames),
        lpaps_source=None
        if item.source_semantic is None
        else pair_distance(generated.tokens, item.source_semantic, frames),
        consistency=None
        if item.acoustic is None
        else acoustic_consistency(item.acoustic, generated.tokens, world_config),
    )


def evaluate(
    generated: Sequence[GeneratedItem],
    references: Sequence[WorldSample],
    world: WorldConfig,
    config: EvalConfig,
    config_hash: str = "",
    workers: int = 1,
) -> EvalReport:
    """Score generations against the references they were conditioned on, paired by index."""
    if len(generated) != len(references):
        raise InputError(f"{len(generated)} generations for {len(references)} references")
    if not generated:
        raise InputError("nothing to evaluate")
    jobs = [(item, ref, world, config) for item, ref in zip(generated, references, strict=True)]
    if workers <= 1:
        scores = [_score_sample(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(_score_sample, jobs))

    counted = [s for s in scores if not (config.exclude_empty_reference and s.empty_reference)]
    flagged = sum(s.empty_reference for s in scores)
    if flagged:
        logger.info("%d references have empty transcripts", flagged)
    histogram = HistogramEmbedder(world.vocab.semantic_vocab_size, config.embed_dim, config.embedder_seed)
    frame_id = FrameEmbedder(1, config.embed_dim, config.embedder_seed).embedder_id

    def record(name: str, value: float, count: int, embedder_id: str | None = None) -> MetricRecord:
        return MetricRecord(
            name=name, value=value, sample_count=count, embedder_id=embedder_id, config_hash=config_hash
        )

    metrics: list[MetricRecord] = []
    if counted:
        metrics.append(record("wer", float(np.mean([s.wer_pred for s in counted])), len(counted)))
        metrics.append(record("wer_gt", float(np.mean([s.wer_gt for s in counted])), len(counted)))
        metrics.append(
            record("delta_wer", delta_wer([(s.wer_gt, s.wer_pred) for s in counted]), len(counted))
        )
    metrics.append(
        record(
            "fad",
            fad(
                [r.semantic.tokens for r in references],
                [g.semantic for g in generated],
                histogram,
                config.shrinkage,
                config.shrinkage_lambda,
            ),
            len(scores),
            histogram.embedder_id,
        )
    )
    metrics.append(record("lpaps", float(np.mean([s.lpaps for s in scores])), len(scores), frame_id))
    if all(s.lpaps_source is not None for s in scores):
        metrics.append(
            record("lpaps_source", float(np.mean([s.lpaps_source for s in scores])), len(scores), frame_id)
        )
        metrics.append(record("lpaps_target", float(np.mean([s.lpaps for s in scores])), len(scores), frame_id))
    metrics.append(record("desync", float(np.mean([s.desync for s in scores])), len(scores)))
    if all(s.consistency is not None for s in scores):
        metrics.append(
            record("acoustic_consistency", float(np.mean([s.consistency for s in scores])), len(scores))
        )
    return EvalReport(metrics=metrics, flagged_empty_references=flagged)
