"""Unit tests for the stage-2 models, per-layer loss, training step and coarse-to-fine decoder."""

import math

import pytest
import torch
from torch import nn

from mcp_bvs.api_models import LayeredDecodeConfig, OptimizerConfig
from mcp_bvs.errors import ConfigError, ShapeError
from mcp_bvs.nncore import OptimizerState
from mcp_bvs.sampler import iterative_decode
from mcp_bvs.synthworld import gen_sample, sample_seed
from mcp_bvs.tokenspace import MaskState
from mcp_bvs.vs2a import (
    VS2ABatch,
    collate_vs2a,
    init_vs2a,
    sum_condition_embeddings,
    vs2a_generate,
    vs2a_loss,
    vs2a_train_step,
)


class OracleLayerModel(nn.Module):
    """One-hot logits on the true digits of whichever layer is asked for."""

    def __init__(self, acoustic):
        super().__init__()
        self.acoustic = acoustic

    def forward(self, semantic, below, masked_layer, layer_index, video, drop_video=None):
        target = self.acoustic[:, layer_index - 1]
        target = target.repeat(semantic.shape[0] // target.shape[0], 1)
        logits = torch.zeros(*target.shape, 8)
        return logits.scatter_(-1, target.unsqueeze(-1), 60.0)


class OracleBundle(nn.Module):
    def __init__(self, world, acoustic):
        super().__init__()
        self.world = world
        self.oracle = OracleLayerModel(acoustic)

    def model_for(self, layer_index):
        return self.oracle


@pytest.fixture
def examples(run_config):
    return collate_vs2a([gen_sample(run_config.world, sample_seed(1, i)) for i in range(5)])


@pytest.fixture
def bundle(run_config):
    return init_vs2a(run_config.world, run_config.vs2a_first, run_config.vs2a_rest, seed=0)


def batch_for(examples, mask_value=True):
    masks = torch.full(examples.acoustic.shape, mask_value)
    return VS2ABatch(
        examples.semantic, examples.acoustic, examples.video, MaskState(masks), torch.zeros(5, dtype=torch.bool)
    )


class TestSumConditionEmbeddings:
    """Test the positionwise condition sum."""

    def test_first_layer(self, bundle, examples):
        """Layer 1 sums the semantic embedding and the masked layer-1 embedding only."""
        model = bundle.first
        layer = examples.acoustic[:, 0]
        got = sum_condition_embeddings(model, examples.semantic, examples.acoustic[:, :0], layer, 1)
        expected = model.backbone.token_embedding(examples.semantic) + model.acoustic_embeds[0](layer)
        assert torch.equal(got, expected)

    def test_zero_tables(self, bundle, examples):
        """All-zero tables give a zero sequence."""
        model = bundle.rest
        with torch.no_grad():
            for parameter in model.parameters():
                parameter.zero_()
        got = sum_condition_embeddings(
            model, examples.semantic, examples.acoustic[:, :2], examples.acoustic[:, 2], 3
        )
        assert not got.any()

    def test_positionwise(self, bundle, examples):
        """Permuting all inputs jointly permutes the sum identically."""
        model = bundle.rest
        order = torch.randperm(20, generator=torch.Generator().manual_seed(0))
        args = (examples.semantic, examples.acoustic[:, :1], examples.acoustic[:, 1])
        plain = sum_condition_embeddings(model, *args, 2)
        permuted = sum_condition_embeddings(
            model, args[0][:, order], args[1][:, :, order], args[2][:, order], 2
        )
        assert torch.equal(plain[:, order], permuted)

    def test_length_mismatch(self, bundle, examples):
        """A short masked layer raises ShapeError."""
        with pytest.raises(ShapeError):
            sum_condition_embeddings(
                bundle.first, examples.semantic, examples.acoustic[:, :0], examples.acoustic[:, 0, :10], 1
            )

    def test_wrong_model_for_layer(self, bundle, examples):
        """The layer-1 model refuses layer 2."""
        with pytest.raises(ShapeError):
            sum_condition_embeddings(
                bundle.first, examples.semantic, examples.acoustic[:, :1], examples.acoustic[:, 1], 2
            )


class TestLoss:
    """Test the per-layer loss."""

    def test_untrained_near_uniform(self, bundle, examples):
        """A fresh model scores about ln 8 on a fully masked layer."""
        for layer_index in range(1, 5):
            loss = vs2a_loss(bundle, batch_for(examples), layer_index)
            assert float(loss.value) == pytest.approx(math.log(8), abs=0.1)

    def test_nothing_masked(self, bundle, examples):
        """An empty mask gives 0 and a degenerate flag."""
        loss = vs2a_loss(bundle, batch_for(examples, mask_value=False), 2)
        assert float(loss.value) == 0.0
        assert loss.degenerate

    def test_layer_isolation(self, bundle, examples):
        """Changing layer i+1 leaves the layer-i loss unchanged."""
        batch = batch_for(examples)
        changed = examples.acoustic.clone()
        changed[:, 2] = (changed[:, 2] + 1) % 8
        other = VS2ABatch(batch.semantic, changed, batch.video, batch.masks, batch.drop_video)
        assert torch.equal(vs2a_loss(bundle, batch, 2).value, vs2a_loss(bundle, other, 2).value)

    def test_layer_out_of_range(self, bundle, examples):
        """Layer 5 does not exist."""
        with pytest.raises(ShapeError):
            vs2a_loss(bundle, batch_for(examples), 5)


class TestTrainStep:
    """Test one optimizer step of stage 2."""

    def test_reports_every_layer(self, bundle, examples, generator):
        """Per-layer losses are reported separately and the total combines them."""
        state = OptimizerState(bundle, OptimizerConfig(warmup_steps=0))
        report = vs2a_train_step(bundle, state, examples, generator)
        assert len(report.layer_losses) == 4
        expected = report.layer_losses[0] + sum(report.layer_losses[1:]) / 3
        assert report.loss == pytest.approx(expected, rel=1e-5)
        assert state.step == 1

    def test_reproducible(self, run_config, examples):
        """Same seeds give identical losses."""

        def run():
            bundle = init_vs2a(run_config.world, run_config.vs2a_first, run_config.vs2a_rest, seed=0)
            state = OptimizerState(bundle, OptimizerConfig(warmup_steps=0))
            return [
                vs2a_train_step(bundle, state, examples, torch.Generator().manual_seed(s)).loss
                for s in range(3)
            ]

        assert run() == run()


class TestGenerate:
    """Test coarse-to-fine decoding."""

    @pytest.mark.parametrize("steps", [[20, 10, 1, 1], [1, 1, 1, 1], [4, 4, 4, 4]])
    def test_oracle_reproduced(self, run_config, examples, steps, generator):
        """Oracle models reproduce the digit code for any schedule."""
        oracle = OracleBundle(run_config.world, examples.acoustic)
        config = LayeredDecodeConfig(steps_per_layer=steps)
        out = vs2a_generate(oracle, examples.semantic, examples.video, config, generator)
        assert torch.equal(out, examples.acoustic)

    def test_grid_shape_and_range(self, bundle, examples, generator):
        """A real bundle returns a mask-free (batch, K, T) grid."""
        config = LayeredDecodeConfig(steps_per_layer=[2, 1, 1, 1])
        out = vs2a_generate(bundle, examples.semantic, examples.video, config, generator)
        assert out.shape == (5, 4, 20)
        assert int(out.max()) < 8

    def test_layer_causality(self, run_config, examples):
        """Randomizing the upper-layer model cannot change layer 1."""
        config = LayeredDecodeConfig(steps_per_layer=[3, 2, 1, 1])
        bundle = init_vs2a(run_config.world, run_config.vs2a_first, run_config.vs2a_rest, seed=0)
        first = vs2a_generate(bundle, examples.semantic, examples.video, config, torch.Generator().manual_seed(5))
        with torch.no_grad():
            for parameter in bundle.rest.parameters():
                parameter.normal_()
        second = vs2a_generate(bundle, examples.semantic, examples.video, config, torch.Generator().manual_seed(5))
        assert torch.equal(first[:, 0], second[:, 0])

    def test_steps_length(self, bundle, examples, generator):
        """A schedule without one entry per layer raises ConfigError."""
        with pytest.raises(ConfigError):
            vs2a_generate(
                bundle, examples.semantic, examples.video, LayeredDecodeConfig(steps_per_layer=[1, 1]), generator
            )

    def test_unit_guidance_is_conditional_decoding(self, bundle, examples):
        """cfg 1 decodes every layer exactly as the conditional models alone do."""
        config = LayeredDecodeConfig(steps_per_layer=[3, 2, 1, 1], cfg_scale=1.0)
        keep = torch.zeros(5, dtype=torch.bool)
        generator = torch.Generator().manual_seed(4)
        decoded = torch.empty(5, 0, 20, dtype=torch.long)
        with torch.no_grad():
            for layer_index in range(1, 5):
                model, below = bundle.model_for(layer_index), decoded

                def conditional(tokens, model=model, below=below, layer_index=layer_index):
                    return model(examples.semantic, below, tokens, layer_index, examples.video, keep), None

                initial = torch.full((5, 20), 8, dtype=torch.long)
                layer = iterative_decode(conditional, initial, 8, config.for_layer(layer_index), generator)
                decoded = torch.cat([decoded, layer.unsqueeze(1)], dim=1)
        out = vs2a_generate(bundle, examples.semantic, examples.video, config, torch.Generator().manual_seed(4))
        assert torch.equal(out, decoded)

    def test_zero_guidance_drops_video(self, bundle, examples):
        """cfg 0 keeps only the unconditional pass, which ignores the video."""
        config = LayeredDecodeConfig(steps_per_layer=[2, 1, 1, 1], cfg_scale=0.0)
        g = torch.Generator().manual_seed(9)
        other_video = torch.randn(examples.video.shape, generator=g, dtype=examples.video.dtype)
        a = vs2a_generate(bundle, examples.semantic, examples.video, config, torch.Generator().manual_seed(6))
        b = vs2a_generate(bundle, examples.semantic, other_video, config, torch.Generator().manual_seed(6))
        assert torch.equal(a, b)
