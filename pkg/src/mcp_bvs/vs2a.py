"""Stage 2: semantic tokens plus video to the layered acoustic grid.

One model predicts layer 1; a second, shared model predicts layers 2..K and
is told which layer it is on by a learned layer-index embedding. Conditions
are summed into every position instead of attended to.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .api_models import LayeredDecodeConfig, MaskSchedule, ModelConfig, WorldConfig
from .errors import ConfigError, ShapeError
from .masksched import MaskedLoss, apply_mask, masked_ce_loss, sample_batch_masks
from .nncore import Backbone, OptimizerState, init_module, loss_and_gradients, optimizer_step
from .sampler import StepHook, iterative_decode
from .tokenspace import MaskState
from .v2as import SEMANTIC, VIDEO

logger = logging.getLogger(__name__)


class AcousticModel(nn.Module):
    """Backbone whose token embedding reads semantic ids and whose head emits one codebook."""

    def __init__(self, world: WorldConfig, config: ModelConfig, rest: bool) -> None:
        super().__init__()
        vocab = world.vocab
        dim = config.model_dim
        self.world = world
        self.config = config
        self.rest = rest
        self.backbone = Backbone(config)
        self.acoustic_embeds = nn.ModuleList(
            nn.Embedding(vocab.acoustic_vocab_per_layer + 1, dim) for _ in range(vocab.acoustic_layers)
        )
        self.layer_embed = nn.Embedding(vocab.acoustic_layers - 1, dim) if rest else None
        self.video_proj = nn.Linear(world.video_dim, dim)
        self.video_null = nn.Parameter(torch.zeros(1, 1, dim))
        self.modality = nn.Embedding(2, dim)

    def layer_range(self) -> range:
        return range(2, self.world.vocab.acoustic_layers + 1) if self.rest else range(1, 2)

    def forward(
        self,
        semantic: torch.Tensor,
        below: torch.Tensor,
        masked_layer: torch.Tensor,
        layer_index: int,
        video: torch.Tensor,
        drop_video: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Logits over the layer-``layer_index`` codebook at every semantic position."""
        main = sum_condition_embeddings(self, semantic, below, masked_layer, layer_index)
        batch, length, _ = main.shape
        if video.ndim != 3 or video.shape[0] != batch or length != self.world.ratio * video.shape[1]:
            raise ShapeError(f"video features of shape {tuple(video.shape)} do not fit {length} tokens")
        prefix = self.video_proj(video)
        if drop_video is not None:
            prefix = torch.where(drop_video.view(-1, 1, 1), self.video_null.expand_as(prefix), prefix)
        joint = torch.cat(
            [prefix + self.modality.weight[VIDEO], main + self.modality.weight[SEMANTIC]], dim=1
        )
        return self.backbone(joint)[:, -length:]


def sum_condition_embeddings(
    model: AcousticModel,
    semantic: torch.Tensor,
    below: torch.Tensor,
    masked_layer: torch.Tensor,
    layer_index: int,
) -> torch.Tensor:
    """Positionwise sum of semantic, lower-layer, masked-layer and layer-index embeddings.

    Args:
        semantic: (batch, T) semantic ids.
        below: (batch, layer_index - 1, T) ground-truth or decoded lower layers.
        masked_layer: (batch, T) layer ``layer_index`` ids, mask id where masked.
        layer_index: 1-based layer being predicted.
    """
    if layer_index not in model.layer_range():
        raise ShapeError(f"layer {layer_index} is outside {list(model.layer_range())} for this model")
    if semantic.shape != masked_layer.shape:
        raise ShapeError(f"semantic {tuple(semantic.shape)} and layer {tuple(masked_layer.shape)} differ")
    expected_below = (semantic.shape[0], layer_index - 1, semantic.shape[1])
    if tuple(below.shape) != expected_below:
        raise ShapeError(f"lower layers have shape {tuple(below.shape)}, expected {expected_below}")
    total = model.backbone.token_embedding(semantic)
    for k in range(layer_index - 1):
        total = total + model.acoustic_embeds[k](below[:, k])
    total = total + model.acoustic_embeds[layer_index - 1](masked_layer)
    if model.layer_embed is not None:
        total = total + model.layer_embed.weight[layer_index - 2]
    return total


class VS2ABundle(nn.Module):
    """The layer-1 model and the shared layers-2..K model."""

    def __init__(self, world: WorldConfig, first: ModelConfig, rest: ModelConfig) -> None:
        super().__init__()
        self.world = world
        self.first = AcousticModel(world, first, rest=False)
        self.rest = AcousticModel(world, rest, rest=True)

    def model_for(self, layer_index: int) -> AcousticModel:
        return self.first if layer_index == 1 else self.rest


def init_vs2a(world: WorldConfig, first: ModelConfig, rest: ModelConfig, seed: int) -> VS2ABundle:
    bundle = VS2ABundle(world, first, rest)
    init_module(bundle.first, seed, first.init_std)
    init_module(bundle.rest, seed + 1, rest.init_std)
    return bundle


@dataclass(frozen=True)
class VS2AExamples:
    semantic: torch.Tensor
    acoustic: torch.Tensor
    video: torch.Tensor

    def __len__(self) -> int:
        return self.semantic.shape[0]

    def select(self, indices: torch.Tensor) -> "VS2AExamples":
        return VS2AExamples(self.semantic[indices], self.acoustic[indices], self.video[indices])


@dataclass(frozen=True)
class VS2ABatch:
    """Semantic ids, acoustic grid (batch, K, T), one mask per layer and video-drop flags."""

    semantic: torch.Tensor
    acoustic: torch.Tensor
    video: torch.Tensor
    masks: MaskState
    drop_video: torch.Tensor

    def layer_mask(self, layer_index: int) -> torch.Tensor:
        return self.masks.mask[:, layer_index - 1]


def collate_vs2a(samples: Sequence) -> VS2AExamples:
    return VS2AExamples(
        semantic=torch.from_numpy(np.stack([s.semantic.tokens for s in samples])),
        acoustic=torch.from_numpy(np.stack([s.acoustic.layers for s in samples])),
        video=torch.from_numpy(np.stack([s.video.frames for s in samples])),
    )


def make_vs2a_batch(
    examples: VS2AExamples,
    generator: torch.Generator,
    dropout_prob: float,
    schedule: MaskSchedule | None = None,
) -> VS2ABatch:
    """Independent masks for every layer of every example, plus video dropout."""
    batch, layers, length = examples.acoustic.shape
    per_layer = sample_batch_masks(batch * layers, length, generator, schedule)
    masks = MaskState(per_layer.mask.view(batch, layers, length), per_layer.t.view(batch, layers))
    drop_video = torch.rand(batch, generator=generator, dtype=torch.float64) < dropout_prob
    return VS2ABatch(examples.semantic, examples.acoustic, examples.video, masks, drop_video)


def layer_logits(bundle: VS2ABundle, batch: VS2ABatch, layer_index: int) -> torch.Tensor:
    mask_id = bundle.world.vocab.acoustic_mask_id
    target = batch.acoustic[:, layer_index - 1]
    masked = apply_mask(target, batch.layer_mask(layer_index), mask_id)
    below = batch.acoustic[:, : layer_index - 1]
    model = bundle.model_for(layer_index)
    return model(batch.semantic, below, masked, layer_index, batch.video, batch.drop_video)


def vs2a_loss(bundle: VS2ABundle, batch: VS2ABatch, layer_index: int) -> MaskedLoss:
    """Masked cross-entropy on layer ``layer_index``; lower layers are ground truth."""
    if not 1 <= layer_index <= bundle.world.vocab.acoustic_layers:
        raise ShapeError(f"layer {layer_index} outside 1..{bundle.world.vocab.acoustic_layers}")
    logits = layer_logits(bundle, batch, layer_index)
    return masked_ce_loss(logits, batch.acoustic[:, layer_index - 1], batch.layer_mask(layer_index))


@dataclass(frozen=True)
class VS2AStepReport:
    loss: float
    learning_rate: float
    layers: list[MaskedLoss]

    @property
    def layer_losses(self) -> list[float]:
        return [float(layer.value) for layer in self.layers]

    @property
    def layer_accuracies(self) -> list[float]:
        return [layer.accuracy for layer in self.layers]

    @property
    def masked_accuracy(self) -> float:
        masked = sum(layer.num_masked for layer in self.layers)
        return sum(layer.correct for layer in self.layers) / masked if masked else 0.0

    @property
    def degenerate(self) -> bool:
        return all(layer.degenerate for layer in self.layers)


def vs2a_train_step(
    bundle: VS2ABundle,
    state: OptimizerState,
    examples: VS2AExamples,
    generator: torch.Generator,
    schedule: MaskSchedule | None = None,
) -> VS2AStepReport:
    """One AdamW step on ``loss_1 + mean(loss_2..loss_K)``."""
    batch = make_vs2a_batch(examples, generator, bundle.first.config.condition_dropout_prob, schedule)
    layers = bundle.world.vocab.acoustic_layers
    captured: list[MaskedLoss] = []

    def loss_fn(b: VS2ABundle, batch: VS2ABatch) -> torch.Tensor:
        captured.clear()
        captured.extend(vs2a_loss(b, batch, i) for i in range(1, layers + 1))
        rest = torch.stack([layer.value for layer in captured[1:]]).mean() if layers > 1 else 0.0
        return captured[0].value + rest

    value, gradients = loss_and_gradients(bundle, batch, loss_fn)
    detached = [MaskedLoss(m.value.detach(), m.num_masked, m.correct) for m in captured]
    lr = optimizer_step(state, bundle, gradients, skip_update=all(m.degenerate for m in detached))
    return VS2AStepReport(value, lr, detached)


@torch.no_grad()
def vs2a_generate(
    bundle: VS2ABundle,
    semantic: torch.Tensor,
    video: torch.Tensor,
    config: LayeredDecodeConfig,
    generator: torch.Generator,
    on_step: StepHook | None = None,
) -> torch.Tensor:
    """Decode layers coarse to fine, each conditioned on the layers already decoded.

    The unconditional pass drops the video prefix.

    Returns:
        (batch, K, T_sem) acoustic ids, free of the mask id.
    """
    vocab = bundle.world.vocab
    if len(config.steps_per_layer) != vocab.acoustic_layers:
        raise ConfigError(
            f"steps_per_layer has {len(config.steps_per_layer)} entries for {vocab.acoustic_layers} layers"
        )
    if min(config.steps_per_layer) < 1:
        raise ConfigError("every layer needs at least one decoding step")
    batch, length = semantic.shape
    mask_id = vocab.acoustic_mask_id
    keep = torch.zeros(batch, dtype=torch.bool)
    drop = torch.ones(batch, dtype=torch.bool)
    guided = config.cfg_scale != 1.0
    decoded = torch.empty(batch, 0, length, dtype=torch.long)
    for layer_index in range(1, vocab.acoustic_layers + 1):
        model = bundle.model_for(layer_index)
        below = decoded

        def score_fn(tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
            if not guided:
                return model(semantic, below, tokens, layer_index, video, keep), None
            logits = model(
                torch.cat([semantic, semantic]),
                torch.cat([below, below]),
                torch.cat([tokens, tokens]),
                layer_index,
                torch.cat([video, video]),
                torch.cat([keep, drop]),
            )
            return logits[:batch], logits[batch:]

        initial = torch.full((batch, length), mask_id, dtype=torch.long)
        layer = iterative_decode(
            score_fn, initial, mask_id, config.for_layer(layer_index), generator, on_step
        )
        decoded = torch.cat([decoded, layer.unsqueeze(1)], dim=1)
        logger.debug("decoded acoustic layer %d", layer_index)
    return decoded
