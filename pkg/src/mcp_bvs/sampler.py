"""Iterative parallel decoding with classifier-free guidance."""

import math
from collections.abc import Callable

import torch

from .api_models import DecodeConfig, MaskSchedule
from .errors import ConfigError, NumericError, ShapeError
from .masksched import gamma

ScoreFn = Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor | None]]
StepHook = Callable[[int, torch.Tensor, torch.Tensor], None]


def cfg_combine(
    cond_logits: torch.Tensor,
    uncond_logits: torch.Tensor | None,
    scale: float,
    clamp: float | None = 30.0,
) -> torch.Tensor:
    """Guided logits ``uncond + scale * (cond - uncond)``.

    Scales 1 and 0 return the conditional and unconditional logits unchanged;
    any other scale is clamped to ``[-clamp, clamp]``.
    """
    if uncond_logits is not None and uncond_logits.shape != cond_logits.shape:
        raise ShapeError(
            f"conditional {tuple(cond_logits.shape)} and unconditional "
            f"{tuple(uncond_logits.shape)} logits differ in shape"
        )
    if scale == 1.0 or uncond_logits is None:
        return cond_logits
    if scale == 0.0:
        return uncond_logits
    combined = uncond_logits + scale * (cond_logits - uncond_logits)
    return combined if clamp is None else combined.clamp(-clamp, clamp)


def unmask_counts(total_masked: int, steps: int, schedule: MaskSchedule | None = None) -> list[int]:
    """Number of positions committed at each decoding step.

    After step j (1-based) ``floor(gamma(j / steps) * total_masked)`` positions
    stay masked; none stay masked after the last step.
    """
    if steps < 1:
        raise ConfigError(f"steps must be at least 1, got {steps}")
    remaining = [math.floor(gamma(j / steps, schedule) * total_masked) for j in range(1, steps)]
    remaining.append(0)
    counts, previous = [], total_masked
    for left in remaining:
        left = min(left, previous)
        counts.append(previous - left)
        previous = left
    return counts


def temperature_at(step: int, config: DecodeConfig) -> float:
    """Linear temperature from ``temperature_start`` to ``temperature_end``."""
    if config.steps == 1:
        return config.temperature_end
    frac = step / (config.steps - 1)
    return config.temperature_start + (config.temperature_end - config.temperature_start) * frac


def _gumbel(shape: torch.Size, generator: torch.Generator) -> torch.Tensor:
    uniform = torch.rand(shape, generator=generator, dtype=torch.float64).clamp(1e-20, 1 - 1e-12)
    return -torch.log(-torch.log(uniform))


def iterative_decode(
    score_fn: ScoreFn,
    initial: torch.Tensor,
    mask_id: int,
    config: DecodeConfig,
    generator: torch.Generator,
    on_step: StepHook | None = None,
) -> torch.Tensor:
    """Fill every masked position of ``initial`` over ``config.steps`` passes.

    Each pass scores the current sequence, samples a candidate at every
    masked position, ranks candidates by log-probability plus annealed Gumbel
    noise and commits the pass's quota of most confident ones. Committed
    tokens never change afterwards.

    Args:
        score_fn: maps a (batch, length) token tensor to conditional and
            unconditional logits of shape (batch, length, vocab).
        initial: (batch, length) tokens; positions equal to ``mask_id`` are decoded.
        mask_id: the mask sentinel.
        config: steps, guidance scale and temperature/noise schedule.
        generator: seeded source of all randomness.
        on_step: called as ``on_step(step, committed_mask, tokens)`` after every pass.

    Returns:
        The decoded (batch, length) tensor, free of ``mask_id``.
    """
    tokens = initial.clone()
    masked = tokens == mask_id
    quotas = [unmask_counts(int(row.sum()), config.steps, config.schedule) for row in masked]
    for step in range(config.steps):
        cond, uncond = score_fn(tokens)
        logits = cfg_combine(cond, uncond, config.cfg_scale, config.logit_clamp)
        if not bool(torch.isfinite(logits).all()):
            raise NumericError(f"non-finite scores at decoding step {step + 1}")
        logits = logits.double()
        temperature = temperature_at(step, config)
        noise_scale = temperature if config.noise_scale is None else config.noise_scale
        if step == config.steps - 1:
            noise_scale = 0.0
        log_probs = logits.log_softmax(dim=-1)
        if temperature > 0:
            flat = (logits / temperature).softmax(dim=-1).reshape(-1, logits.shape[-1])
            sampled = torch.multinomial(flat, 1, generator=generator).view(tokens.shape)
        else:
            sampled = logits.argmax(dim=-1)
        confidence = log_probs.gather(-1, sampled.unsqueeze(-1)).squeeze(-1)
        if noise_scale > 0:
            confidence = confidence + noise_scale * _gumbel(confidence.shape, generator)
        confidence = confidence.masked_fill(~masked, -math.inf)
        committed = torch.zeros_like(masked)
        for row in range(tokens.shape[0]):
            quota = quotas[row][step]
            if quota:
                chosen = confidence[row].topk(quota).indices
                committed[row, chosen] = True
        tokens = torch.where(committed, sampled, tokens)
        masked = masked & ~committed
        if on_step is not None:
            on_step(step, committed, tokens.clone())
    return tokens
