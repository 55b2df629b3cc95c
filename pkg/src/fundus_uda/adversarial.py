"""Self-information maps and the two patch discriminators used for output-space alignment."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .network import PROB_CLAMP

SOURCE_LABEL = 1.0
TARGET_LABEL = 0.0


def self_information(prob: torch.Tensor) -> torch.Tensor:
    """Elementwise ``-p * ln(p)`` with ``0 * ln 0 = 0``; same shape as ``prob``."""
    p = prob.clamp(0.0, 1.0)
    safe = p.clamp_min(PROB_CLAMP)
    return torch.where(p > 0, -p * torch.log(safe), torch.zeros_like(p))


class PatchDiscriminator(nn.Module):
    """Four stride-2 convolutions mapping a 2-channel information map to a patch logit grid."""

    def __init__(self, in_channels: int = 2, width: int = 16):
        super().__init__()
        chans = [in_channels, width, 2 * width, 2 * width]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        layers.append(nn.Conv2d(chans[-1], 1, 4, stride=2, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _bce_to(logits: torch.Tensor, value: float) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, value))


def discriminator_loss(D: nn.Module, real_maps: torch.Tensor, fake_maps: torch.Tensor) -> torch.Tensor:
    """Half the sum of the per-set mean BCE terms: real -> 1 (source side), target -> 0."""
    return 0.5 * (_bce_to(D(real_maps), SOURCE_LABEL) + _bce_to(D(fake_maps), TARGET_LABEL))


def discriminator_step(D: nn.Module, optimizer: torch.optim.Optimizer, real_maps: torch.Tensor,
                       fake_maps: torch.Tensor) -> float:
    """One optimizer step on ``D`` only; inputs are detached from the segmentation graph."""
    if len(real_maps) == 0 or len(fake_maps) == 0:
        raise ValueError("discriminator_step needs non-empty batches")
    for p in D.parameters():
        p.requires_grad_(True)
    optimizer.zero_grad(set_to_none=True)
    loss = discriminator_loss(D, real_maps.detach(), fake_maps.detach())
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite discriminator loss {loss.item()}")
    loss.backward()
    optimizer.step()
    return loss.item()


def generator_adv_loss(D1: nn.Module, D2: nn.Module, target_maps: torch.Tensor) -> torch.Tensor:
    """Both discriminators scored on target maps toward the source label, summed.

    Discriminator weights are frozen for the evaluation so gradients reach
    only the segmentation network.
    """
    total = target_maps.new_zeros(())
    for D in (D1, D2):
        if D is None:
            continue
        for p in D.parameters():
            p.requires_grad_(False)
        total = total + _bce_to(D(target_maps), SOURCE_LABEL)
        for p in D.parameters():
            p.requires_grad_(True)
    return total

