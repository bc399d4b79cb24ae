"""Token vocabularies, sequence types and the exact oracle codecs.

Semantic ids pair a speech id with a background id
(``speech * background_vocab_size + background``). Acoustic layers are the
base-B digits of a semantic id, most significant digit first, so layer 1 is
the coarsest.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .api_models import VocabSpec
from .errors import NonImageCodeError, RangeError, ShapeError

SILENCE = 0
QUIET = 0


def _as_ids(tokens: object) -> np.ndarray:
    return np.asarray(tokens, dtype=np.int64).reshape(-1)


def _check_range(ids: np.ndarray, limit: int, what: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= limit):
        bad = int(np.flatnonzero((ids < 0) | (ids >= limit))[0])
        raise RangeError(
            f"{what} id {int(ids[bad])} at position {bad} outside [0, {limit})",
            {"position": bad, "id": int(ids[bad]), "limit": limit},
        )


@dataclass(frozen=True, eq=False)
class SemanticTokenSequence:
    """Fused speech+background token stream."""

    tokens: np.ndarray
    rate: float = 50.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", _as_ids(self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SemanticTokenSequence) and np.array_equal(self.tokens, other.tokens)

    def validate(self, vocab: VocabSpec, length: int | None = None) -> None:
        _check_range(self.tokens, vocab.semantic_vocab_size, "semantic")
        if length is not None and len(self) != length:
            raise ShapeError(f"semantic sequence has length {len(self)}, expected {length}")


@dataclass(frozen=True, eq=False)
class SpeechTokenSequence:
    """Speech-only token stream at the semantic rate."""

    tokens: np.ndarray
    rate: float = 50.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", _as_ids(self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SpeechTokenSequence) and np.array_equal(self.tokens, other.tokens)

    def validate(self, vocab: VocabSpec) -> None:
        _check_range(self.tokens, vocab.speech_vocab_size, "speech")


@dataclass(frozen=True, eq=False)
class AcousticTokenGrid:
    """K acoustic layers of equal length, layer 1 first."""

    layers: np.ndarray

    def __post_init__(self) -> None:
        layers = np.asarray(self.layers, dtype=np.int64)
        if layers.ndim != 2:
            raise ShapeError(f"acoustic grid must be 2-D (layers, time), got shape {layers.shape}")
        object.__setattr__(self, "layers", layers)

    @property
    def num_layers(self) -> int:
        return self.layers.shape[0]

    def __len__(self) -> int:
        return self.layers.shape[1]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, AcousticTokenGrid) and np.array_equal(self.layers, other.layers)

    def validate(self, vocab: VocabSpec) -> None:
        if self.num_layers != vocab.acoustic_layers:
            raise ShapeError(f"grid has {self.num_layers} layers, expected {vocab.acoustic_layers}")
        _check_range(self.layers.reshape(-1), vocab.acoustic_vocab_per_layer, "acoustic")


@dataclass(frozen=True, eq=False)
class VideoFeatureSequence:
    """Per-frame continuous condition vectors."""

    frames: np.ndarray
    ratio: int = 10

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2:
            raise ShapeError(f"video features must be 2-D (frames, dim), got shape {frames.shape}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, VideoFeatureSequence)
            and self.ratio == other.ratio
            and np.array_equal(self.frames, other.frames)
        )

    def check_alignment(self, semantic_length: int) -> None:
        if semantic_length != self.ratio * len(self):
            raise ShapeError(
                f"{semantic_length} semantic tokens do not match {len(self)} frames at ratio {self.ratio}"
            )


@dataclass(frozen=True)
class MaskState:
    """Binary mask (True = masked) and the masking time that produced it."""

    mask: torch.Tensor
    t: torch.Tensor = field(default_factory=lambda: torch.zeros(()))

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())


# Pairing bijection


def fuse_pair(speech_id: int, background_id: int, vocab: VocabSpec) -> int:
    """Pair a speech id with a background id into one semantic id."""
    if not 0 <= speech_id < vocab.speech_vocab_size:
        raise RangeError(f"speech id {speech_id} outside [0, {vocab.speech_vocab_size})")
    if not 0 <= background_id < vocab.background_vocab_size:
        raise RangeError(f"background id {background_id} outside [0, {vocab.background_vocab_size})")
    return speech_id * vocab.background_vocab_size + background_id


def split_semantic(semantic_id: int, vocab: VocabSpec) -> tuple[int, int]:
    """Inverse of :func:`fuse_pair`."""
    if not 0 <= semantic_id < vocab.semantic_vocab_size:
        raise RangeError(f"semantic id {semantic_id} outside [0, {vocab.semantic_vocab_size})")
    speech_id, background_id = divmod(semantic_id, vocab.background_vocab_size)
    return speech_id, background_id


def fuse_streams(speech: object, background: object, vocab: VocabSpec) -> SemanticTokenSequence:
    """Positionwise :func:`fuse_pair` over two equal-length streams."""
    speech_ids, background_ids = _as_ids(speech), _as_ids(background)
    if speech_ids.shape != background_ids.shape:
        raise ShapeError(f"speech length {speech_ids.size} != background length {background_ids.size}")
    _check_range(speech_ids, vocab.speech_vocab_size, "speech")
    _check_range(background_ids, vocab.background_vocab_size, "background")
    return SemanticTokenSequence(speech_ids * vocab.background_vocab_size + background_ids)


def split_stream(semantic: SemanticTokenSequence, vocab: VocabSpec) -> tuple[np.ndarray, np.ndarray]:
    """Positionwise :func:`split_semantic`; returns (speech ids, background ids)."""
    semantic.validate(vocab)
    return np.divmod(semantic.tokens, vocab.background_vocab_size)


# Acoustic digit code


def acoustic_permutation(vocab: VocabSpec, seed: int) -> np.ndarray:
    """Seeded permutation of the semantic ids applied before digit expansion."""
    return np.random.default_rng(seed).permutation(vocab.semantic_vocab_size)


def _digit_weights(vocab: VocabSpec) -> np.ndarray:
    base, layers = vocab.acoustic_vocab_per_layer, vocab.acoustic_layers
    return base ** np.arange(layers - 1, -1, -1, dtype=np.int64)


def encode_acoustic(
    semantic: SemanticTokenSequence, vocab: VocabSpec, permutation: np.ndarray | None = None
) -> AcousticTokenGrid:
    """Expand every semantic id into K base-B digits, most significant first."""
    semantic.validate(vocab)
    codes = semantic.tokens if permutation is None else permutation[semantic.tokens]
    digits = (codes[None, :] // _digit_weights(vocab)[:, None]) % vocab.acoustic_vocab_per_layer
    return AcousticTokenGrid(digits)


def recombine_digits(grid: AcousticTokenGrid, vocab: VocabSpec) -> np.ndarray:
    """Codes spelled by the grid's digits, without checking the semantic range."""
    grid.validate(vocab)
    return (grid.layers * _digit_weights(vocab)[:, None]).sum(axis=0)


def decode_acoustic(
    grid: AcousticTokenGrid, vocab: VocabSpec, permutation: np.ndarray | None = None
) -> SemanticTokenSequence:
    """Exact inverse of :func:`encode_acoustic`."""
    codes = recombine_digits(grid, vocab)
    limit = vocab.semantic_vocab_size
    outside = np.flatnonzero(codes >= limit)
    if outside.size:
        position = int(outside[0])
        raise NonImageCodeError(position, int(codes[position]), limit)
    if permutation is not None:
        codes = np.argsort(permutation)[codes]
    return SemanticTokenSequence(codes)
