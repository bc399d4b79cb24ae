"""Single-stage ablation: speech tokens plus video straight to the acoustic grid.

There are no semantic tokens in between. The layered acoustic models of
stage 2 read speech ids where stage 2 reads semantic ids, so one model has to
fuse speech with the video and render acoustics at the same time.
"""

import logging
from collections.abc import Sequence

import numpy as np
import torch

from .api_models import ModelConfig, WorldConfig
from .errors import NonImageCodeError
from .tokenspace import AcousticTokenGrid, decode_acoustic, recombine_digits
from .vs2a import VS2ABundle, VS2AExamples, init_vs2a

logger = logging.getLogger(__name__)


def init_single(world: WorldConfig, first: ModelConfig, rest: ModelConfig, seed: int) -> VS2ABundle:
    return init_vs2a(world, first, rest, seed)


def collate_single(samples: Sequence) -> VS2AExamples:
    """Stack samples with each speech stream in the condition slot."""
    return VS2AExamples(
        semantic=torch.from_numpy(np.stack([s.speech.tokens for s in samples])),
        acoustic=torch.from_numpy(np.stack([s.acoustic.layers for s in samples])),
        video=torch.from_numpy(np.stack([s.video.frames for s in samples])),
    )


def semantic_from_grid(
    acoustic: torch.Tensor, world: WorldConfig, permutation: np.ndarray | None = None
) -> tuple[torch.Tensor, int]:
    """Semantic ids spelled by a batch of generated grids.

    Columns outside the semantic vocabulary become id 0 (silence over a quiet
    background) and are counted.

    Returns:
        (batch, T) semantic ids and the number of non-image columns.
    """
    vocab = world.vocab
    rows = []
    non_image = 0
    for layers in acoustic.numpy():
        grid = AcousticTokenGrid(layers)
        try:
            rows.append(decode_acoustic(grid, vocab, permutation).tokens)
            continue
        except NonImageCodeError:
            valid = recombine_digits(grid, vocab) < vocab.semantic_vocab_size
        row = np.zeros(len(grid), dtype=np.int64)
        if valid.any():
            row[valid] = decode_acoustic(AcousticTokenGrid(layers[:, valid]), vocab, permutation).tokens
        non_image += int((~valid).sum())
        rows.append(row)
    if non_image:
        logger.info("%d generated columns fall outside the semantic vocabulary", non_image)
    return torch.from_numpy(np.stack(rows)), non_image
