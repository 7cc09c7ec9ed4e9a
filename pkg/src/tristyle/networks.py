"""Shared network building blocks.

Style-modulated convolutions in the StyleGAN2 lineage, with equalized
learning rate (unit-normal weight init, scaling applied at call time) and
smooth activations throughout so finite-difference gradient checks are
well conditioned. All parameters are drawn from an explicit numpy
generator at construction time; no torch global RNG is consumed.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .rng import normal_tensor

__all__ = [
    "EqualizedLinear",
    "EqualizedConv2d",
    "ModulatedConv2d",
    "StyleBlock",
    "MappingNetwork",
    "pixel_norm",
]


def pixel_norm(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


def _act(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


class EqualizedLinear(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias_init: float = 0.0, lr_mul: float = 1.0, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(normal_tensor((out_dim, in_dim), rng, 1.0 / lr_mul, dtype))
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init), dtype=dtype))
        self.scale = lr_mul / np.sqrt(in_dim)
        self.lr_mul = lr_mul

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class EqualizedConv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(normal_tensor((out_ch, in_ch, kernel, kernel), rng, 1.0, dtype))
        self.bias = nn.Parameter(torch.zeros(out_ch, dtype=dtype))
        self.scale = 1.0 / np.sqrt(in_ch * kernel * kernel)
        self.stride = stride
        self.padding = kernel // 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.weight * self.scale, self.bias,
                        stride=self.stride, padding=self.padding)


class ModulatedConv2d(nn.Module):
    """Weight modulation / demodulation convolution.

    Computed in the non-grouped form (style-scale the input, run one shared
    convolution, rescale outputs by the demodulation coefficient), which is
    algebraically the per-sample modulated-weight convolution.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, w_dim: int,
                 rng: np.random.Generator, demodulate: bool = True, dtype=torch.float32):
        super().__init__()
        self.affine = EqualizedLinear(w_dim, in_ch, rng, bias_init=1.0, dtype=dtype)
        self.weight = nn.Parameter(normal_tensor((out_ch, in_ch, kernel, kernel), rng, 1.0, dtype))
        self.scale = 1.0 / np.sqrt(in_ch * kernel * kernel)
        self.demodulate = demodulate
        self.padding = kernel // 2

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        b, in_ch, _, _ = x.shape
        style = self.affine(w)  # (B, in_ch)
        weight = self.weight * self.scale
        out = F.conv2d(x * style.reshape(b, in_ch, 1, 1), weight, padding=self.padding)
        if self.demodulate:
            w2 = weight.pow(2).reshape(1, weight.shape[0], in_ch, -1).sum(-1)  # (1, out, in)
            denom = torch.rsqrt((w2 * style.pow(2).unsqueeze(1)).sum(-1) + 1e-8)  # (B, out)
            out = out * denom.unsqueeze(-1).unsqueeze(-1)
        return out


class StyleBlock(nn.Module):
    """Modulated conv + bias + smooth activation."""

    def __init__(self, in_ch: int, out_ch: int, w_dim: int, rng: np.random.Generator,
                 kernel: int = 3, dtype=torch.float32):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, kernel, w_dim, rng, dtype=dtype)
        self.bias = nn.Parameter(torch.zeros(out_ch, dtype=dtype))

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        x = self.conv(x, w)
        return _act(x + self.bias.reshape(1, -1, 1, 1))


class MappingNetwork(nn.Module):
    """MLP from (pixel-normed z, optional embedded condition label) to w."""

    def __init__(self, z_dim: int, w_dim: int, n_layers: int, rng: np.random.Generator,
                 label_dim: int = 0, lr_mul: float = 0.1, dtype=torch.float32):
        super().__init__()
        self.z_dim = z_dim
        self.label_dim = label_dim
        in_dim = z_dim
        if label_dim > 0:
            self.label_embed = EqualizedLinear(label_dim, w_dim, rng, dtype=dtype)
            in_dim = z_dim + w_dim
        layers = []
        for i in range(n_layers):
            layers.append(EqualizedLinear(in_dim if i == 0 else w_dim, w_dim, rng,
                                          lr_mul=lr_mul, dtype=dtype))
        self.layers = nn.ModuleList(layers)

    def forward(self, z: torch.Tensor, label: torch.Tensor | None = None) -> torch.Tensor:
        x = pixel_norm(z)
        if self.label_dim > 0:
            if label is None:
                raise ValueError("mapping network requires a condition label")
            x = torch.cat([x, self.label_embed(label)], dim=-1)
        for layer in self.layers:
            x = _act(layer(x))
        return x
