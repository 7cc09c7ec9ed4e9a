"""Frozen feature extractors: perceptual distance and identity embeddings.

The perceptual distance uses a fixed-seed strided conv network that is
never trained; distances sum channel-normalized feature differences over
layers. The identity embedder is a small classifier trained once on the
synthetic dataset's identity labels and then frozen; its penultimate
features give a cosine-similarity identity signal.

Both stand in for large pretrained perceptual/recognition networks; all
comparisons in the pipeline use them consistently on both sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError
from .networks import EqualizedConv2d, EqualizedLinear
from .rng import rng_from

__all__ = [
    "FrozenFeatureExtractor",
    "perceptual_distance",
    "IdentityEmbedder",
    "train_identity_embedder",
    "identity_cosine",
]


class FrozenFeatureExtractor(nn.Module):
    """4 strided conv layers, fixed random weights, channel-unit-normalized taps."""

    def __init__(self, seed: int = 77, channels: int = 24, dtype=torch.float32):
        super().__init__()
        self.seed = seed
        rng = rng_from(seed, "frozen-extractor")
        chans = [3, channels, channels * 2, channels * 2, channels * 4]
        self.convs = nn.ModuleList(
            EqualizedConv2d(chans[i], chans[i + 1], 3, rng, stride=2, dtype=dtype)
            for i in range(4)
        )
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        """Per-layer activations for a (B, 3, H, W) image batch."""
        x = img
        taps = []
        for conv in self.convs:
            x = F.silu(conv(x))
            taps.append(x)
        return taps


def _unit_normalize(feat: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return feat * torch.rsqrt(feat.pow(2).sum(dim=1, keepdim=True) + eps)


def perceptual_distance(
    extractor: FrozenFeatureExtractor, a: torch.Tensor, b: torch.Tensor
) -> torch.Tensor:
    """Symmetric non-negative distance between image batches; 0 iff equal taps.

    Sum over layers of the mean squared difference of channel-unit-normalized
    activations. Returns (B,).
    """
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    total = None
    for fa, fb in zip(extractor.features(a), extractor.features(b)):
        diff = (_unit_normalize(fa) - _unit_normalize(fb)).pow(2)
        term = diff.sum(dim=1).mean(dim=(1, 2))
        total = term if total is None else total + term
    return total


class IdentityEmbedder(nn.Module):
    """Small conv classifier; penultimate features are the identity embedding."""

    def __init__(self, n_identities: int, resolution: int = 64, seed: int = 78,
                 embed_dim: int = 64, dtype=torch.float32):
        super().__init__()
        self.n_identities = n_identities
        rng = rng_from(seed, "identity-embedder")
        n_down = int(np.log2(resolution / 8))
        chans = [3] + [min(16 * 2 ** i, 64) for i in range(n_down)]
        self.convs = nn.ModuleList(
            EqualizedConv2d(chans[i], chans[i + 1], 3, rng, stride=2, dtype=dtype)
            for i in range(n_down)
        )
        self.embed = EqualizedLinear(chans[-1] * 8 * 8, embed_dim, rng, dtype=dtype)
        self.head = EqualizedLinear(embed_dim, n_identities, rng, dtype=dtype)

    def embedding(self, img: torch.Tensor) -> torch.Tensor:
        x = img
        for conv in self.convs:
            x = F.silu(conv(x))
        return F.silu(self.embed(x.reshape(x.shape[0], -1)))

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.head(self.embedding(img))


def train_identity_embedder(
    images: torch.Tensor,
    identities: torch.Tensor,
    n_identities: int,
    steps: int = 600,
    batch_size: int = 16,
    lr: float = 2e-3,
    seed: int = 78,
) -> IdentityEmbedder:
    """Train the identity classifier once, then freeze it."""
    if images.shape[0] == 0:
        raise DataError("empty identity training set")
    model = IdentityEmbedder(n_identities, resolution=images.shape[-1], seed=seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = rng_from(seed, "identity-train")
    n = images.shape[0]
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(0, n, size=min(batch_size, n)))
        logits = model(images[idx])
        loss = F.cross_entropy(logits, identities[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def identity_cosine(embedder: IdentityEmbedder, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of identity embeddings, (B,)."""
    ea = embedder.embedding(a)
    eb = embedder.embedding(b)
    return F.cosine_similarity(ea, eb, dim=-1)
