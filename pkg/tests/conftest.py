"""Shared fixtures: a tiny world and run config small enough for unit tests."""

import pytest
import torch

from mcp_bvs.api_models import (
    DecodeConfig,
    EvalConfig,
    LayeredDecodeConfig,
    ModelConfig,
    OptimizerConfig,
    RunConfig,
    TrainConfig,
    WorldConfig,
)


def tiny_world(**overrides) -> WorldConfig:
    fields = {
        "semantic_length": 20,
        "video_length": 4,
        "video_dim": 4,
        "lexicon_size": 8,
        "min_word_length": 2,
        "max_word_length": 3,
        "max_words": 2,
        "max_segments": 3,
    }
    fields.update(overrides)
    return WorldConfig(**fields)


def tiny_acoustic_model(input_vocab_size: int) -> ModelConfig:
    return ModelConfig(
        depth=1,
        model_dim=16,
        heads=2,
        feedforward_dim=32,
        cross_attention_positions=[],
        input_vocab_size=input_vocab_size,
        output_vocab_size=8,
        max_sequence_length=24,
    )


def tiny_run_config(**overrides) -> RunConfig:
    fields = {
        "world": tiny_world(),
        "v2as": ModelConfig(
            depth=2,
            model_dim=16,
            heads=2,
            feedforward_dim=32,
            cross_attention_positions=[2],
            max_sequence_length=24,
        ),
        "vs2a_first": tiny_acoustic_model(528),
        "vs2a_rest": tiny_acoustic_model(528),
        "single_first": tiny_acoustic_model(33),
        "single_rest": tiny_acoustic_model(33),
        "optimizer": OptimizerConfig(learning_rate=1e-3, warmup_steps=2),
        "train": TrainConfig(batch_size=4, max_steps=4, log_every=1, checkpoint_every=2),
        "decode_v2as": DecodeConfig(steps=2),
        "decode_vs2a": LayeredDecodeConfig(steps_per_layer=[2, 1, 1, 1]),
        "eval": EvalConfig(embed_dim=4, shrinkage=True),
    }
    fields.update(overrides)
    return RunConfig(**fields)


@pytest.fixture
def world_config() -> WorldConfig:
    return tiny_world()


@pytest.fixture
def run_config() -> RunConfig:
    return tiny_run_config()


@pytest.fixture
def generator() -> torch.Generator:
    return torch.Generator().manual_seed(0)
