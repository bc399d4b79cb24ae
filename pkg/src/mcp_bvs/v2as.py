"""Stage 1: video plus speech tokens to semantic tokens.

The joint sequence is the projected video prefix followed by the masked
semantic embeddings. Speech tokens reach the model only as cross-attention
memory.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .api_models import DecodeConfig, MaskSchedule, ModelConfig, WorldConfig
from .errors import ConfigError, ShapeError
from .masksched import MaskedLoss, apply_mask, masked_ce_loss, sample_batch_masks
from .nncore import Backbone, OptimizerState, init_module, loss_and_gradients, optimizer_step
from .sampler import StepHook, iterative_decode
from .tokenspace import MaskState

logger = logging.getLogger(__name__)

VIDEO, SEMANTIC = 0, 1


class V2ASModel(nn.Module):
    """Backbone plus video projection, modality embeddings and speech memory tables."""

    def __init__(self, world: WorldConfig, config: ModelConfig) -> None:
        super().__init__()
        self.world = world
        self.config = config
        dim = config.model_dim
        self.backbone = Backbone(config)
        self.video_proj = nn.Linear(world.video_dim, dim)
        self.video_null = nn.Parameter(torch.zeros(1, 1, dim))
        self.modality = nn.Embedding(2, dim)
        self.speech_embed = nn.Embedding(world.vocab.speech_vocab_size, dim)
        self.speech_pos = nn.Embedding(world.semantic_length, dim)

    def assemble_inputs(
        self,
        masked_semantic: torch.Tensor,
        video: torch.Tensor,
        drop_video: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Video prefix then semantic embeddings, each tagged with its modality."""
        batch, semantic_length = masked_semantic.shape
        if video.ndim != 3 or video.shape[0] != batch or video.shape[2] != self.world.video_dim:
            raise ShapeError(f"video features of shape {tuple(video.shape)} do not fit the batch")
        if semantic_length != self.world.ratio * video.shape[1]:
            raise ShapeError(
                f"{semantic_length} semantic tokens do not match {video.shape[1]} frames "
                f"at ratio {self.world.ratio}"
            )
        prefix = self.video_proj(video)
        if drop_video is not None:
            prefix = torch.where(drop_video.view(-1, 1, 1), self.video_null.expand_as(prefix), prefix)
        prefix = prefix + self.modality.weight[VIDEO]
        main = self.backbone.token_embedding(masked_semantic) + self.modality.weight[SEMANTIC]
        return torch.cat([prefix, main], dim=1)

    def speech_memory(self, speech: torch.Tensor) -> torch.Tensor:
        """Speech token embeddings with their own positional table."""
        if speech.shape[1] > self.world.semantic_length:
            raise ShapeError(f"speech length {speech.shape[1]} exceeds {self.world.semantic_length}")
        return self.speech_embed(speech) + self.speech_pos.weight[: speech.shape[1]]

    def forward(
        self,
        masked_semantic: torch.Tensor,
        video: torch.Tensor,
        speech: torch.Tensor | None,
        drop_speech: torch.Tensor | None = None,
        drop_video: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Logits over the semantic segment only."""
        joint = self.assemble_inputs(masked_semantic, video, drop_video)
        memory = None if speech is None else self.speech_memory(speech)
        logits = self.backbone(joint, memory, drop_speech)
        return logits[:, -masked_semantic.shape[1] :]


def init_v2as(world: WorldConfig, config: ModelConfig, seed: int) -> V2ASModel:
    return init_module(V2ASModel(world, config), seed, config.init_std)


@dataclass(frozen=True)
class V2ASExamples:
    """Collated training or evaluation examples."""

    semantic: torch.Tensor
    speech: torch.Tensor
    video: torch.Tensor

    def __len__(self) -> int:
        return self.semantic.shape[0]

    def select(self, indices: torch.Tensor) -> "V2ASExamples":
        return V2ASExamples(self.semantic[indices], self.speech[indices], self.video[indices])


@dataclass(frozen=True)
class V2ASBatch:
    """Targets, conditions, mask and per-example condition-drop flags."""

    semantic: torch.Tensor
    speech: torch.Tensor
    video: torch.Tensor
    mask: MaskState
    drop_speech: torch.Tensor
    drop_video: torch.Tensor

    def __post_init__(self) -> None:
        if self.semantic.shape != self.speech.shape:
            raise ShapeError(
                f"semantic {tuple(self.semantic.shape)} and speech {tuple(self.speech.shape)} differ"
            )


def collate_v2as(samples: Sequence) -> V2ASExamples:
    """Stack :class:`~mcp_bvs.synthworld.WorldSample` records into tensors."""
    return V2ASExamples(
        semantic=torch.from_numpy(np.stack([s.semantic.tokens for s in samples])),
        speech=torch.from_numpy(np.stack([s.speech.tokens for s in samples])),
        video=torch.from_numpy(np.stack([s.video.frames for s in samples])),
    )


def make_v2as_batch(
    examples: V2ASExamples,
    generator: torch.Generator,
    dropout_prob: float,
    schedule: MaskSchedule | None = None,
    disable_speech: bool = False,
) -> V2ASBatch:
    """Sample per-example masks and independent speech/video dropout."""
    batch, length = examples.semantic.shape
    mask = sample_batch_masks(batch, length, generator, schedule)
    drop_speech = torch.rand(batch, generator=generator, dtype=torch.float64) < dropout_prob
    drop_video = torch.rand(batch, generator=generator, dtype=torch.float64) < dropout_prob
    if disable_speech:
        drop_speech = torch.ones(batch, dtype=torch.bool)
    return V2ASBatch(examples.semantic, examples.speech, examples.video, mask, drop_speech, drop_video)


def batch_logits(model: V2ASModel, batch: V2ASBatch) -> torch.Tensor:
    inputs = apply_mask(batch.semantic, batch.mask, model.world.vocab.semantic_mask_id)
    return model(inputs, batch.video, batch.speech, batch.drop_speech, batch.drop_video)


def v2as_loss(model: V2ASModel, batch: V2ASBatch) -> MaskedLoss:
    """Masked cross-entropy over the semantic segment."""
    return masked_ce_loss(batch_logits(model, batch), batch.semantic, batch.mask)


def component_accuracy(
    logits: torch.Tensor, targets: torch.Tensor, mask: MaskState | torch.Tensor, background_vocab: int
) -> tuple[float, float]:
    """Speech and background component accuracy over masked positions."""
    bits = (mask.mask if isinstance(mask, MaskState) else mask).bool()
    if not bool(bits.any()):
        return 0.0, 0.0
    predicted = logits.argmax(dim=-1)[bits]
    expected = targets[bits]
    speech_ok = (predicted // background_vocab) == (expected // background_vocab)
    background_ok = (predicted % background_vocab) == (expected % background_vocab)
    return float(speech_ok.double().mean()), float(background_ok.double().mean())


@dataclass(frozen=True)
class V2ASStepReport:
    loss: float
    learning_rate: float
    masked: MaskedLoss
    speech_accuracy: float
    background_accuracy: float


def v2as_train_step(
    model: V2ASModel,
    state: OptimizerState,
    examples: V2ASExamples,
    generator: torch.Generator,
    schedule: MaskSchedule | None = None,
    disable_speech: bool = False,
) -> V2ASStepReport:
    """One AdamW step on freshly masked and condition-dropped examples."""
    batch = make_v2as_batch(
        examples, generator, model.config.condition_dropout_prob, schedule, disable_speech
    )
    captured: dict[str, object] = {}

    def loss_fn(m: V2ASModel, b: V2ASBatch) -> MaskedLoss:
        logits = batch_logits(m, b)
        result = masked_ce_loss(logits, b.semantic, b.mask)
        captured["logits"], captured["loss"] = logits.detach(), result
        return result

    value, gradients = loss_and_gradients(model, batch, loss_fn)
    masked: MaskedLoss = captured["loss"]
    lr = optimizer_step(state, model, gradients, skip_update=masked.degenerate)
    speech_acc, background_acc = component_accuracy(
        captured["logits"], batch.semantic, batch.mask, model.world.vocab.background_vocab_size
    )
    return V2ASStepReport(value, lr, masked, speech_acc, background_acc)


@torch.no_grad()
def v2as_generate(
    model: V2ASModel,
    video: torch.Tensor,
    speech: torch.Tensor,
    config: DecodeConfig,
    generator: torch.Generator,
    disable_speech: bool = False,
    on_step: StepHook | None = None,
) -> torch.Tensor:
    """Decode semantic tokens for a batch of (video, speech) conditions.

    The unconditional pass drops both speech and video; with ``cfg_scale == 1``
    it is skipped.

    Returns:
        (batch, T_sem) semantic ids, free of the mask id.
    """
    if config.steps < 1:
        raise ConfigError(f"steps must be at least 1, got {config.steps}")
    world = model.world
    batch = video.shape[0]
    if speech.shape != (batch, world.semantic_length):
        raise ShapeError(f"speech tokens of shape {tuple(speech.shape)} do not fit the batch")
    mask_id = world.vocab.semantic_mask_id
    cond_drop = torch.full((batch,), disable_speech, dtype=torch.bool)
    keep = torch.zeros(batch, dtype=torch.bool)
    drop_all = torch.ones(batch, dtype=torch.bool)
    guided = config.cfg_scale != 1.0

    def score_fn(tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        if not guided:
            return model(tokens, video, speech, cond_drop, keep), None
        logits = model(
            torch.cat([tokens, tokens]),
            torch.cat([video, video]),
            torch.cat([speech, speech]),
            torch.cat([cond_drop, drop_all]),
            torch.cat([keep, drop_all]),
        )
        return logits[:batch], logits[batch:]

    initial = torch.full((batch, world.semantic_length), mask_id, dtype=torch.long)
    tokens = iterative_decode(score_fn, initial, mask_id, config, generator, on_step)
    logger.debug("decoded %d semantic sequences in %d steps", batch, config.steps)
    return tokens
