"""Mask-and-predict machinery: gamma(t), Bernoulli masks and the masked loss."""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .api_models import MaskSchedule, ScheduleKind
from .errors import DomainError, NumericError, ShapeError
from .tokenspace import MaskState


def gamma(t: float, schedule: MaskSchedule | None = None) -> float:
    """Masking probability at time ``t`` in [0, 1)."""
    schedule = schedule or MaskSchedule()
    if not 0.0 <= t < 1.0:
        raise DomainError(f"t={t} outside [0, 1)")
    match schedule.kind:
        case ScheduleKind.COSINE:
            value = math.cos(math.pi * t / 2)
        case ScheduleKind.LINEAR:
            value = 1.0 - t
        case ScheduleKind.SQUARE:
            value = 1.0 - t * t
    return max(value, schedule.epsilon)


def gamma_tensor(t: torch.Tensor, schedule: MaskSchedule | None = None) -> torch.Tensor:
    """Elementwise :func:`gamma` for a tensor of times."""
    schedule = schedule or MaskSchedule()
    if bool(((t < 0) | (t >= 1)).any()):
        raise DomainError("masking times must lie in [0, 1)")
    match schedule.kind:
        case ScheduleKind.COSINE:
            value = torch.cos(math.pi * t / 2)
        case ScheduleKind.LINEAR:
            value = 1.0 - t
        case ScheduleKind.SQUARE:
            value = 1.0 - t * t
    return value.clamp_min(schedule.epsilon)


def sample_mask(
    length: int,
    t: float,
    generator: torch.Generator,
    schedule: MaskSchedule | None = None,
) -> MaskState:
    """Mask each of ``length`` positions independently with probability gamma(t)."""
    if length <= 0:
        raise DomainError(f"mask length must be positive, got {length}")
    probability = gamma(t, schedule)
    mask = torch.rand(length, generator=generator) < probability
    return MaskState(mask=mask, t=torch.tensor(t, dtype=torch.float64))


def sample_batch_masks(
    batch_size: int,
    length: int,
    generator: torch.Generator,
    schedule: MaskSchedule | None = None,
) -> MaskState:
    """Per-example masks with t drawn uniformly from [0, 1) for every example."""
    t = torch.rand(batch_size, generator=generator, dtype=torch.float64)
    probability = gamma_tensor(t, schedule)
    mask = torch.rand(batch_size, length, generator=generator, dtype=torch.float64) < probability[:, None]
    return MaskState(mask=mask, t=t)


def apply_mask(tokens: torch.Tensor, mask: MaskState | torch.Tensor, mask_id: int) -> torch.Tensor:
    """Replace masked positions with ``mask_id``; the input is left untouched."""
    bits = mask.mask if isinstance(mask, MaskState) else mask
    if bits.shape != tokens.shape:
        raise ShapeError(f"mask shape {tuple(bits.shape)} != token shape {tuple(tokens.shape)}")
    return torch.where(bits.bool(), torch.full_like(tokens, mask_id), tokens)


@dataclass(frozen=True)
class MaskedLoss:
    """Mean cross-entropy over masked positions."""

    value: torch.Tensor
    num_masked: int
    correct: int

    @property
    def degenerate(self) -> bool:
        return self.num_masked == 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.num_masked if self.num_masked else 0.0


def masked_ce_loss(
    logits: torch.Tensor, targets: torch.Tensor, mask: MaskState | torch.Tensor
) -> MaskedLoss:
    """Cross-entropy averaged over masked positions only.

    Unmasked positions are never read, so the loss is exactly invariant to
    their targets and logits. With no masked position the loss is 0 and the
    result is flagged degenerate.
    """
    bits = (mask.mask if isinstance(mask, MaskState) else mask).bool()
    if logits.shape[:-1] != targets.shape or bits.shape != targets.shape:
        raise ShapeError(
            f"logits {tuple(logits.shape)}, targets {tuple(targets.shape)} and mask "
            f"{tuple(bits.shape)} disagree"
        )
    if torch.isnan(logits).any():
        raise NumericError("NaN in logits")
    selected_logits = logits[bits]
    selected_targets = targets[bits]
    num_masked = int(selected_targets.numel())
    if num_masked == 0:
        return MaskedLoss(value=logits.new_zeros(()), num_masked=0, correct=0)
    value = F.cross_entropy(selected_logits, selected_targets, reduction="mean")
    correct = int((selected_logits.argmax(dim=-1) == selected_targets).sum())
    return MaskedLoss(value=value, num_masked=num_masked, correct=correct)
