"""Camera-conditioned dual discriminator and adversarial objectives.

The dual discriminator scores the 6-channel concatenation of the final
image and the (upsampled) raw render RGB, with projection conditioning on
the 25-number camera label. The 2D style prior reuses the same network
with 3 input channels and no conditioning.

Objectives are the margin form of the adversarial game written as
minimized losses:

    d_loss = mean(relu(1 - real)) + mean(relu(1 + fake))
    g_loss = mean(softplus(-fake))

plus the R1 gradient penalty 0.5 * gamma * ||grad_x D||^2 on real inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .networks import EqualizedConv2d, EqualizedLinear
from .rng import rng_from

__all__ = [
    "DiscriminatorConfig",
    "Discriminator",
    "dual_input",
    "loss_d_hinge",
    "loss_g_nonsat",
    "r1_penalty",
]


@dataclass(frozen=True)
class DiscriminatorConfig:
    resolution: int = 64
    in_channels: int = 6  # final RGB ++ upsampled raw RGB
    label_dim: int = 25  # 0 disables conditioning
    base_channels: int = 32
    max_channels: int = 128


def dual_input(final: torch.Tensor, raw_rgb: torch.Tensor) -> torch.Tensor:
    """Stack final image and raw render RGB (nearest-upsampled to match)."""
    if raw_rgb.shape[-1] != final.shape[-1]:
        factor = final.shape[-1] // raw_rgb.shape[-1]
        raw_rgb = F.interpolate(raw_rgb, scale_factor=factor, mode="nearest")
    return torch.cat([final, raw_rgb], dim=1)


class Discriminator(nn.Module):
    """Strided conv encoder with projection conditioning on the pose label."""

    def __init__(self, cfg: DiscriminatorConfig, seed: int, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        rng = rng_from(seed, "discriminator")
        n_down = int(np.log2(cfg.resolution / 4))
        chans = [min(cfg.base_channels * 2 ** i, cfg.max_channels) for i in range(n_down + 1)]
        convs = [EqualizedConv2d(cfg.in_channels, chans[0], 3, rng, dtype=dtype)]
        for i in range(n_down):
            convs.append(EqualizedConv2d(chans[i], chans[i + 1], 3, rng, stride=2, dtype=dtype))
        self.convs = nn.ModuleList(convs)
        feat_dim = chans[-1] * 4 * 4
        self.fc = EqualizedLinear(feat_dim, chans[-1], rng, dtype=dtype)
        self.out = EqualizedLinear(chans[-1], 1, rng, dtype=dtype)
        if cfg.label_dim > 0:
            self.label_proj = EqualizedLinear(cfg.label_dim, chans[-1], rng, dtype=dtype)

    def forward(self, images: torch.Tensor, label: torch.Tensor | None = None) -> torch.Tensor:
        """Images (B, in_channels, R, R) [+ label (B, label_dim)] -> logits (B,)."""
        if images.shape[1] != self.cfg.in_channels or images.shape[-1] != self.cfg.resolution:
            raise ValueError(
                f"expected (B, {self.cfg.in_channels}, {self.cfg.resolution}, "
                f"{self.cfg.resolution}), got {tuple(images.shape)}"
            )
        x = images.to(self.dtype)
        for conv in self.convs:
            x = F.silu(conv(x))
        h = F.silu(self.fc(x.reshape(x.shape[0], -1)))
        logit = self.out(h).squeeze(-1)
        if self.cfg.label_dim > 0:
            if label is None:
                raise ValueError("conditional discriminator requires a pose label")
            proj = (self.label_proj(label.to(self.dtype)) * h).sum(dim=-1)
            logit = logit + proj / np.sqrt(h.shape[-1])
        return logit


def loss_d_hinge(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Margin loss: zero iff all real logits >= 1 and all fake logits <= -1."""
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


def loss_g_nonsat(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss, mean softplus(-fake)."""
    return F.softplus(-fake_logits).mean()


def r1_penalty(
    disc: Discriminator,
    images: torch.Tensor,
    label: torch.Tensor | None = None,
    gamma: float = 1.0,
) -> torch.Tensor:
    """0.5 * gamma * ||grad_images D||^2, averaged over the batch.

    Differentiable in the discriminator parameters (create_graph), for use
    as a lazy regularizer on real samples.
    """
    images = images.detach().requires_grad_(True)
    logits = disc(images, label)
    (grad,) = torch.autograd.grad(logits.sum(), images, create_graph=True)
    penalty = grad.pow(2).reshape(grad.shape[0], -1).sum(dim=1).mean()
    return 0.5 * gamma * penalty
