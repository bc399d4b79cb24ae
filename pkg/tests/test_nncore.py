"""Unit tests for the transformer backbone, gradients, optimizer and checkpoints."""

import pytest
import torch
from torch import nn

from mcp_bvs.api_models import ModelConfig, OptimizerConfig
from mcp_bvs.errors import ConditionError, ConfigError, IntegrityError, NumericError, ShapeError
from mcp_bvs.masksched import masked_ce_loss
from mcp_bvs.nncore import (
    OptimizerState,
    init_params,
    learning_rate_at,
    load_checkpoint,
    loss_and_gradients,
    optimizer_step,
    read_checkpoint,
    save_checkpoint,
)


def small_config(**overrides) -> ModelConfig:
    fields = {
        "depth": 2,
        "model_dim": 16,
        "heads": 2,
        "feedforward_dim": 32,
        "cross_attention_positions": [2],
        "input_vocab_size": 11,
        "output_vocab_size": 10,
        "max_sequence_length": 12,
    }
    fields.update(overrides)
    return ModelConfig(**fields)


def make_batch(seed: int = 0, length: int = 8, unused_token: int | None = None):
    g = torch.Generator().manual_seed(seed)
    high = 10 if unused_token is None else unused_token
    tokens = torch.randint(0, high, (2, length), generator=g)
    mask = torch.rand(2, length, generator=g) < 0.6
    mask[:, 0] = True
    memory = torch.randn(2, 5, 16, generator=g, dtype=torch.float64)
    return tokens, mask, memory


def loss_fn(model, batch):
    tokens, mask, memory = batch
    inputs = torch.where(mask, torch.full_like(tokens, 10), tokens)
    logits = model(inputs, memory.to(model.head.weight.dtype))
    return masked_ce_loss(logits, tokens, mask)


class TestInit:
    """Test deterministic initialisation."""

    def test_same_seed_identical(self):
        """Same seed gives bitwise-identical parameters."""
        a, b = init_params(small_config(), 3), init_params(small_config(), 3)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb)

    def test_different_seeds_differ(self):
        """Different seeds give different weights."""
        a, b = init_params(small_config(), 3), init_params(small_config(), 4)
        assert not torch.equal(a.head.weight, b.head.weight)

    def test_biases_zero(self):
        """Every bias starts at zero."""
        model = init_params(small_config(), 0)
        for name, parameter in model.named_parameters():
            if name.endswith("bias"):
                assert not parameter.any(), name

    def test_layer_norm_gain_one(self):
        """LayerNorm gains start at one."""
        model = init_params(small_config(), 0)
        assert torch.equal(model.head_norm.weight, torch.ones(16))


class TestForward:
    """Test the forward pass."""

    def test_depth_zero_is_head_of_embedding(self):
        """With no blocks the logits are the head over embedding plus position."""
        config = small_config(depth=0, cross_attention_positions=[])
        model = init_params(config, 1)
        tokens = torch.tensor([[1, 2, 3]])
        x = model.token_embedding(tokens) + model.position_embedding.weight[:3]
        expected = model.head(model.head_norm(x))
        assert torch.equal(model(tokens), expected)

    def test_deterministic(self):
        """Identical inputs give identical outputs."""
        model = init_params(small_config(), 2)
        tokens, _, memory = make_batch()
        assert torch.equal(model(tokens, memory.float()), model(tokens, memory.float()))

    def test_memory_permutation_invariance(self):
        """A memory of equal vectors is order-free."""
        model = init_params(small_config(), 2)
        tokens, _, _ = make_batch()
        row = torch.randn(1, 1, 16)
        memory = row.expand(2, 5, 16).clone()
        permuted = memory[:, torch.tensor([4, 2, 0, 1, 3])]
        assert torch.allclose(model(tokens, memory), model(tokens, permuted))

    def test_missing_memory(self):
        """Cross-attention without memory raises ConditionError."""
        model = init_params(small_config(), 2)
        with pytest.raises(ConditionError):
            model(torch.zeros(1, 4, dtype=torch.long))

    def test_dropped_memory_uses_null(self):
        """A fully dropped condition needs no memory and keeps the output shape."""
        model = init_params(small_config(), 2)
        out = model(torch.zeros(2, 4, dtype=torch.long), None, torch.ones(2, dtype=torch.bool))
        assert out.shape == (2, 4, 10)

    def test_length_overflow(self):
        """Sequences longer than max_sequence_length raise ShapeError."""
        model = init_params(small_config(cross_attention_positions=[]), 2)
        with pytest.raises(ShapeError):
            model(torch.zeros(1, 13, dtype=torch.long))


class TestGradients:
    """Test the gradient contract against finite differences."""

    def test_finite_differences(self):
        """Analytic gradients match central differences at 64-bit on 20 parameters."""
        model = init_params(small_config(init_std=0.3), 5).double()
        batch = make_batch(seed=1)
        _, gradients = loss_and_gradients(model, batch, loss_fn)
        parameters = dict(model.named_parameters())
        names = sorted(parameters)
        g = torch.Generator().manual_seed(11)
        h = 1e-4
        for _ in range(20):
            name = names[int(torch.randint(len(names), (1,), generator=g))]
            flat = parameters[name].data.view(-1)
            index = int(torch.randint(flat.numel(), (1,), generator=g))
            original = float(flat[index])
            with torch.no_grad():
                flat[index] = original + h
                plus = float(loss_fn(model, batch).value)
                flat[index] = original - h
                minus = float(loss_fn(model, batch).value)
                flat[index] = original
            numeric = (plus - minus) / (2 * h)
            analytic = float(gradients[name].view(-1)[index])
            assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric), 1e-2), name

    def test_unused_row_zero(self):
        """An embedding row never used by the batch gets an exact zero gradient."""
        model = init_params(small_config(), 5)
        _, gradients = loss_and_gradients(model, make_batch(unused_token=9), loss_fn)
        assert not gradients["token_embedding.weight"][9].any()

    def test_linearity(self):
        """Doubling the loss doubles every gradient."""
        model = init_params(small_config(), 5).double()
        batch = make_batch()
        _, single = loss_and_gradients(model, batch, loss_fn)
        _, double = loss_and_gradients(model, batch, lambda m, b: loss_fn(m, b).value * 2)
        for name in single:
            assert torch.allclose(double[name], 2 * single[name])

    def test_non_finite_loss(self):
        """A non-finite loss raises NumericError."""
        model = init_params(small_config(), 5)
        with pytest.raises(NumericError):
            loss_and_gradients(model, None, lambda m, b: torch.tensor(float("inf")))


class TestOptimizer:
    """Test AdamW with warm-up."""

    def test_warmup_rule(self):
        """lr ramps linearly and then stays at the base rate."""
        config = OptimizerConfig(learning_rate=2e-4, warmup_steps=500)
        assert learning_rate_at(0, config) == 0.0
        assert learning_rate_at(250, config) == pytest.approx(1e-4)
        assert learning_rate_at(5000, config) == pytest.approx(2e-4)

    def test_zero_gradients_no_decay(self):
        """Zero gradients and no weight decay leave parameters unchanged."""
        model = nn.Linear(3, 2)
        before = [p.detach().clone() for p in model.parameters()]
        state = OptimizerState(model, OptimizerConfig(weight_decay=0.0, warmup_steps=0))
        optimizer_step(state, model, {n: torch.zeros_like(p) for n, p in model.named_parameters()})
        for old, new in zip(before, model.parameters()):
            assert torch.equal(old, new)

    def test_first_step_magnitude(self):
        """The first Adam step moves a scalar by about lr against the gradient sign."""
        model = nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            model.weight.fill_(0.5)
        state = OptimizerState(model, OptimizerConfig(learning_rate=1e-2, weight_decay=0.0, warmup_steps=0))
        lr = optimizer_step(state, model, {"weight": torch.tensor([[3.0]])})
        assert lr == 1e-2
        assert float(model.weight) == pytest.approx(0.5 - 1e-2, rel=1e-6)
        assert state.step == 1

    def test_step_zero_of_warmup(self):
        """At step 0 of warm-up the lr is 0 and nothing moves."""
        model = nn.Linear(2, 2)
        before = model.weight.detach().clone()
        state = OptimizerState(model, OptimizerConfig(warmup_steps=500))
        optimizer_step(state, model, {n: torch.ones_like(p) for n, p in model.named_parameters()})
        assert torch.equal(model.weight, before)

    def test_skipped_update_leaves_parameters(self):
        """A skipped update applies no weight decay and keeps the moments, but counts the step."""
        model = nn.Linear(2, 2)
        state = OptimizerState(model, OptimizerConfig(weight_decay=0.5, warmup_steps=0))
        ones = {n: torch.ones_like(p) for n, p in model.named_parameters()}
        optimizer_step(state, model, ones)
        before = [p.detach().clone() for p in model.parameters()]
        moments = state.optimizer.state[model.weight]["exp_avg"].clone()
        optimizer_step(state, model, {n: torch.zeros_like(p) for n, p in model.named_parameters()}, skip_update=True)
        for old, new in zip(before, model.parameters()):
            assert torch.equal(old, new)
        assert torch.equal(state.optimizer.state[model.weight]["exp_avg"], moments)
        assert state.step == 2
        assert float(state.optimizer.state[model.weight]["step"]) == 2.0

    def test_skip_before_first_update(self):
        """Skipping the very first step keeps bias correction in line with the step count."""
        model = nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            model.weight.fill_(0.5)
        state = OptimizerState(model, OptimizerConfig(learning_rate=1e-2, weight_decay=0.0, warmup_steps=0))
        optimizer_step(state, model, {"weight": torch.zeros(1, 1)}, skip_update=True)
        assert float(model.weight) == 0.5
        optimizer_step(state, model, {"weight": torch.tensor([[3.0]])})
        assert state.step == 2
        assert float(state.optimizer.state[model.weight]["step"]) == 2.0

    def test_shape_mismatch(self):
        """A gradient of the wrong shape raises ShapeError."""
        model = nn.Linear(2, 2)
        state = OptimizerState(model, OptimizerConfig())
        with pytest.raises(ShapeError):
            optimizer_step(state, model, {"weight": torch.zeros(3), "bias": torch.zeros(2)})


class TestCheckpoint:
    """Test the checkpoint container."""

    def trained(self):
        config = small_config()
        model = init_params(config, 7)
        state = OptimizerState(model, OptimizerConfig(warmup_steps=0))
        _, gradients = loss_and_gradients(model, make_batch(), loss_fn)
        optimizer_step(state, model, gradients)
        return config, model, state

    def test_round_trip(self, tmp_path):
        """Parameters, moments and forward outputs survive a round trip bitwise."""
        config, model, state = self.trained()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, state, config, {"note": "x"})
        restored = init_params(config, 99)
        restored_state = OptimizerState(restored, OptimizerConfig(warmup_steps=0))
        checkpoint = load_checkpoint(path, restored, restored_state, config)
        assert checkpoint.meta == {"note": "x"}
        assert restored_state.step == 1
        tokens, _, memory = make_batch()
        assert torch.equal(model(tokens, memory.float()), restored(tokens, memory.float()))
        for parameter, restored_parameter in zip(model.parameters(), restored.parameters()):
            assert torch.equal(
                state.optimizer.state[parameter]["exp_avg_sq"],
                restored_state.optimizer.state[restored_parameter]["exp_avg_sq"],
            )

    def test_truncated(self, tmp_path):
        """A truncated file fails its checksum."""
        config, model, state = self.trained()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, state, config)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(IntegrityError):
            read_checkpoint(path)

    def test_config_mismatch(self, tmp_path):
        """Loading under a config with another vocab size is rejected."""
        config, model, state = self.trained()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, state, config)
        other = small_config(output_vocab_size=12)
        with pytest.raises(ConfigError):
            load_checkpoint(path, init_params(other, 0), None, other)
