"""Minimal bidirectional transformer with optional cross-attention blocks.

Also holds the training plumbing shared by both stages: deterministic
initialisation, the loss/gradient contract, AdamW with linear warm-up and the
checksummed checkpoint container.
"""

import json
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from einops import rearrange
from pydantic import BaseModel
from torch import nn

from .api_models import ModelConfig, OptimizerConfig
from .errors import ConditionError, ConfigError, IntegrityError, NumericError, ShapeError
from .masksched import MaskedLoss
from .records import RecordReader, RecordWriter

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BVSCKPT\x00"
CHECKPOINT_VERSION = 1


class Attention(nn.Module):
    """Multi-head scaled dot-product attention, self or over a memory."""

    def __init__(self, dim: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.scale = 1.0 / math.sqrt(dim // heads)
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, memory: torch.Tensor | None = None) -> torch.Tensor:
        source = x if memory is None else memory
        q = rearrange(self.query(x), "b n (h d) -> b h n d", h=self.heads)
        k = rearrange(self.key(source), "b m (h d) -> b h m d", h=self.heads)
        v = rearrange(self.value(source), "b m (h d) -> b h m d", h=self.heads)
        weights = (torch.einsum("bhnd,bhmd->bhnm", q, k) * self.scale).softmax(dim=-1)
        mixed = torch.einsum("bhnm,bhmd->bhnd", weights, v)
        return self.out(rearrange(mixed, "b h n d -> b n (h d)"))


class Block(nn.Module):
    """Pre-norm block: self-attention, optional cross-attention, feedforward."""

    def __init__(self, config: ModelConfig, cross_attention: bool) -> None:
        super().__init__()
        dim = config.model_dim
        self.self_norm = nn.LayerNorm(dim)
        self.self_attention = Attention(dim, config.heads)
        self.cross_norm = nn.LayerNorm(dim) if cross_attention else None
        self.cross_attention = Attention(dim, config.heads) if cross_attention else None
        self.ff_norm = nn.LayerNorm(dim)
        self.feedforward = nn.Sequential(
            nn.Linear(dim, config.feedforward_dim),
            nn.GELU(),
            nn.Linear(config.feedforward_dim, dim),
        )

    def forward(self, x: torch.Tensor, memory: torch.Tensor | None) -> torch.Tensor:
        x = x + self.self_attention(self.self_norm(x))
        if self.cross_attention is not None:
            x = x + self.cross_attention(self.cross_norm(x), memory)
        return x + self.feedforward(self.ff_norm(x))


class Backbone(nn.Module):
    """Token embedding, learned absolute positions, blocks and output head."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        dim = config.model_dim
        self.token_embedding = nn.Embedding(config.input_vocab_size, dim)
        self.position_embedding = nn.Embedding(config.max_sequence_length, dim)
        positions = set(config.cross_attention_positions)
        self.blocks = nn.ModuleList(
            Block(config, cross_attention=index + 1 in positions) for index in range(config.depth)
        )
        # Stands in for the whole memory of a dropped condition.
        self.null_memory = nn.Parameter(torch.zeros(1, 1, dim))
        self.head_norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, config.output_vocab_size)

    @property
    def requires_condition(self) -> bool:
        return bool(self.config.cross_attention_positions)

    def condition_memory(
        self, memory: torch.Tensor | None, drop_condition: torch.Tensor | None, batch_size: int
    ) -> torch.Tensor | None:
        """Memory with dropped examples replaced by the learned null vector."""
        if not self.requires_condition:
            return None
        dim = self.config.model_dim
        if drop_condition is None:
            drop_condition = torch.zeros(batch_size, dtype=torch.bool)
        if memory is None:
            if not bool(drop_condition.all()):
                raise ConditionError("cross-attention blocks need a condition memory")
            return self.null_memory.expand(batch_size, 1, dim)
        if memory.ndim != 3 or memory.shape[0] != batch_size or memory.shape[2] != dim:
            raise ShapeError(f"condition memory shape {tuple(memory.shape)} does not fit the batch")
        null = self.null_memory.expand_as(memory)
        return torch.where(drop_condition.view(-1, 1, 1), null, memory)

    def forward(
        self,
        inputs: torch.Tensor,
        memory: torch.Tensor | None = None,
        drop_condition: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Logits for every position of ``inputs`` (ids or embeddings)."""
        x = inputs if inputs.is_floating_point() else self.token_embedding(inputs)
        length = x.shape[1]
        if length > self.config.max_sequence_length:
            raise ShapeError(
                f"sequence length {length} exceeds max_sequence_length {self.config.max_sequence_length}"
            )
        x = x + self.position_embedding.weight[:length]
        memory = self.condition_memory(memory, drop_condition, x.shape[0])
        for block in self.blocks:
            x = block(x, memory)
        return self.head(self.head_norm(x))


def init_module[M: nn.Module](module: M, seed: int, std: float = 0.02) -> M:
    """Seeded small-normal weights, zero biases, unit LayerNorm gains."""
    generator = torch.Generator().manual_seed(seed)
    norm_gains = {id(m.weight) for m in module.modules() if isinstance(m, nn.LayerNorm)}
    with torch.no_grad():
        for name, parameter in module.named_parameters():
            if name.endswith("bias"):
                parameter.zero_()
            elif id(parameter) in norm_gains:
                parameter.fill_(1.0)
            else:
                noise = torch.randn(parameter.shape, generator=generator, dtype=torch.float64)
                parameter.copy_(noise * std)
    return module


def init_params(config: ModelConfig, seed: int) -> Backbone:
    """Build a :class:`Backbone` with deterministic parameters."""
    return init_module(Backbone(config), seed, config.init_std)


# Gradient contract


LossFn = Callable[[nn.Module, Any], MaskedLoss | torch.Tensor]


def loss_and_gradients(
    model: nn.Module, batch: Any, loss_fn: LossFn
) -> tuple[float, dict[str, torch.Tensor]]:
    """Scalar loss and its gradient with respect to every named parameter.

    Parameters off the compute path get an exact zero gradient.
    """
    model.zero_grad(set_to_none=True)
    result = loss_fn(model, batch)
    value = result.value if isinstance(result, MaskedLoss) else result
    if not bool(torch.isfinite(value)):
        raise NumericError(f"non-finite loss {float(value)}")
    if value.requires_grad:
        value.backward()
    gradients = {
        name: parameter.grad.detach().clone()
        if parameter.grad is not None
        else torch.zeros_like(parameter)
        for name, parameter in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    return float(value.detach()), gradients


# Optimizer


def learning_rate_at(step: int, config: OptimizerConfig) -> float:
    """Linear warm-up: base_lr * min(1, step / warmup_steps)."""
    if config.warmup_steps <= 0:
        return config.learning_rate
    return config.learning_rate * min(1.0, step / config.warmup_steps)


class OptimizerState:
    """AdamW moments plus the step counter driving warm-up."""

    def __init__(self, model: nn.Module, config: OptimizerConfig) -> None:
        self.config = config
        self.step = 0
        self.names = [name for name, _ in model.named_parameters()]
        self.optimizer = torch.optim.AdamW(
            model.parameters(),
            lr=0.0,
            betas=(config.beta1, config.beta2),
            eps=config.eps,
            weight_decay=config.weight_decay,
            foreach=False,
        )

    @property
    def learning_rate(self) -> float:
        return learning_rate_at(self.step, self.config)


def _skip_moments(state: OptimizerState, parameters: dict[str, nn.Parameter]) -> None:
    # Moments stay put; only the bias-correction step follows state.step.
    for parameter in parameters.values():
        moments = state.optimizer.state[parameter]
        if not moments:
            moments["exp_avg"] = torch.zeros_like(parameter, memory_format=torch.preserve_format)
            moments["exp_avg_sq"] = torch.zeros_like(parameter, memory_format=torch.preserve_format)
        moments["step"] = torch.tensor(float(state.step + 1))


def optimizer_step(
    state: OptimizerState,
    model: nn.Module,
    gradients: dict[str, torch.Tensor],
    skip_update: bool = False,
) -> float:
    """Apply one AdamW update with decoupled weight decay; returns the lr used.

    With ``skip_update`` (a batch with nothing masked) parameters and moments
    are left untouched, weight decay included, and only the step counter
    advances.
    """
    parameters = dict(model.named_parameters())
    if set(gradients) != set(parameters):
        missing = sorted(set(parameters) ^ set(gradients))
        raise ShapeError(f"gradients do not match parameters: {missing[:5]}")
    for name, parameter in parameters.items():
        gradient = gradients[name]
        if gradient.shape != parameter.shape:
            raise ShapeError(
                f"gradient for {name} has shape {tuple(gradient.shape)}, expected {tuple(parameter.shape)}"
            )
    lr = state.learning_rate
    if skip_update:
        _skip_moments(state, parameters)
        state.step += 1
        return lr
    for name, parameter in parameters.items():
        parameter.grad = gradients[name].to(parameter.dtype)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    return lr


# Checkpoints


@dataclass
class Checkpoint:
    """Decoded checkpoint container."""

    version: int
    config_json: str
    meta: dict[str, Any]
    parameters: dict[str, np.ndarray]
    optimizer_step: int | None
    optimizer_hyper: dict[str, Any] | None
    moments: dict[str, tuple[np.ndarray, np.ndarray]]


def save_checkpoint(
    path: str | Path,
    model: nn.Module,
    state: OptimizerState | None,
    config: BaseModel,
    meta: dict[str, Any] | None = None,
) -> None:
    """Write parameters, optimizer state and config with a trailing SHA-256."""
    writer = RecordWriter(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    writer.text(config.model_dump_json())
    writer.text(json.dumps(meta or {}, sort_keys=True))
    named = list(model.named_parameters())
    writer.u32(len(named))
    for name, parameter in named:
        writer.text(name)
        writer.f32_array(parameter.detach().cpu().numpy())
    writer.u8(state is not None)
    if state is not None:
        writer.u64(state.step)
        writer.text(state.config.model_dump_json())
        with_moments = [(n, p) for n, p in named if p in state.optimizer.state]
        writer.u32(len(with_moments))
        for name, parameter in with_moments:
            slot = state.optimizer.state[parameter]
            writer.text(name)
            writer.f32_array(slot["exp_avg"].cpu().numpy())
            writer.f32_array(slot["exp_avg_sq"].cpu().numpy())
    size = writer.write(path)
    logger.debug("wrote checkpoint %s (%d bytes)", path, size)


def read_checkpoint(path: str | Path) -> Checkpoint:
    """Decode and verify a checkpoint file."""
    reader = RecordReader(path, CHECKPOINT_MAGIC, "checkpoint")
    if reader.version != CHECKPOINT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {reader.version}")
    config_json = reader.text()
    meta = json.loads(reader.text())
    parameters = {}
    for _ in range(reader.u32()):
        name = reader.text()
        parameters[name] = reader.f32_array()
    step, hyper, moments = None, None, {}
    if reader.u8():
        step = reader.u64()
        hyper = json.loads(reader.text())
        for _ in range(reader.u32()):
            name = reader.text()
            moments[name] = (reader.f32_array(), reader.f32_array())
    if not reader.exhausted:
        raise IntegrityError(f"trailing bytes in checkpoint {path}")
    return Checkpoint(reader.version, config_json, meta, parameters, step, hyper, moments)


def load_checkpoint(
    path: str | Path,
    model: nn.Module,
    state: OptimizerState | None = None,
    config: BaseModel | None = None,
) -> Checkpoint:
    """Restore ``model`` (and ``state``) from ``path`` bit-for-bit.

    Raises:
        ConfigError: the stored config differs from ``config``, or the
            parameter set does not match ``model``.
        IntegrityError: the file is truncated or corrupt.
    """
    checkpoint = read_checkpoint(path)
    if config is not None and json.loads(checkpoint.config_json) != json.loads(config.model_dump_json()):
        raise ConfigError(f"checkpoint {path} was written for a different config")
    named = dict(model.named_parameters())
    if set(named) != set(checkpoint.parameters):
        raise ConfigError(f"checkpoint {path} parameters do not match the model")
    with torch.no_grad():
        for name, parameter in named.items():
            array = checkpoint.parameters[name]
            if tuple(array.shape) != tuple(parameter.shape):
                raise ConfigError(f"parameter {name} has shape {array.shape} in {path}")
            parameter.copy_(torch.from_numpy(array))
    if state is not None:
        if checkpoint.optimizer_step is None:
            raise ConfigError(f"checkpoint {path} holds no optimizer state")
        state.step = checkpoint.optimizer_step
        for name, (exp_avg, exp_avg_sq) in checkpoint.moments.items():
            parameter = named[name]
            state.optimizer.state[parameter] = {
                "step": torch.tensor(float(checkpoint.optimizer_step)),
                "exp_avg": torch.from_numpy(exp_avg).to(parameter.dtype),
                "exp_avg_sq": torch.from_numpy(exp_avg_sq).to(parameter.dtype),
            }
    return checkpoint
