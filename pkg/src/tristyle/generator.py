"""Pose-conditioned 3D-aware generator.

Structure: mapping MLP (latent + camera label -> w), style-modulated
convolutional synthesis of three feature planes, volume rendering of the
tri-plane field at a requested camera, and a style-modulated
super-resolution head on the rendered feature image.

The per-layer latent stack ("w-plus") has one code per modulated layer;
the first block of codes drives tri-plane synthesis and the remainder the
super-resolution head. Generating from a w code is literally generating
from its broadcast stack, so equal-codes stacks collapse to w-space
generation bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .camera import CameraPose, PoseLabel, generate_rays, pose_to_label
from .errors import ConfigError
from .networks import EqualizedConv2d, MappingNetwork, ModulatedConv2d, StyleBlock
from .renderer import (
    BACKGROUND_VALUE,
    FieldDecoder,
    RenderOutput,
    composite_background,
    volume_render_triplane_batch,
)
from .rng import derive_seed, rng_from

__all__ = [
    "GeneratorConfig",
    "FULL_SCALE_REFERENCE",
    "Generator3D",
    "SynthesisResult",
    "update_ema",
]


@dataclass(frozen=True)
class GeneratorConfig:
    z_dim: int = 64
    w_dim: int = 64
    label_dim: int = 25
    mapping_layers: int = 4
    n_triplane_layers: int = 8
    n_superres_layers: int = 2
    base_channels: int = 64
    triplane_channels: int = 16
    triplane_resolution: int = 32
    feature_dim: int = 16
    decoder_hidden: int = 32
    raw_resolution: int = 32
    final_resolution: int = 64
    n_render_samples: int = 24

    @property
    def layer_count(self) -> int:
        return self.n_triplane_layers + self.n_superres_layers

    @property
    def layer_split(self) -> tuple[int, int]:
        return self.n_triplane_layers, self.n_superres_layers

    def validate(self) -> None:
        n_up = int(np.log2(self.triplane_resolution / 4))
        if 4 * 2 ** n_up != self.triplane_resolution:
            raise ConfigError("triplane_resolution must be 4 * 2^k")
        if n_up > self.n_triplane_layers - 1:
            raise ConfigError("not enough tri-plane layers to reach the plane resolution")
        sr_up = int(np.log2(self.final_resolution / self.raw_resolution))
        if self.raw_resolution * 2 ** sr_up != self.final_resolution:
            raise ConfigError("final_resolution must be raw_resolution * 2^k")
        if sr_up > self.n_superres_layers - 1:
            raise ConfigError("not enough super-resolution layers for the upsampling factor")
        if self.feature_dim < 3:
            raise ConfigError("feature_dim must be >= 3")


# Full-scale reference values (the configuration the desk-scale defaults
# are shrunk from): 17 modulated layers split (14, 3), 512-wide latents,
# 512 px output from a 128 px raw render.
FULL_SCALE_REFERENCE = GeneratorConfig(
    z_dim=512,
    w_dim=512,
    n_triplane_layers=14,
    n_superres_layers=3,
    triplane_channels=32,
    triplane_resolution=256,
    raw_resolution=128,
    final_resolution=512,
)


@dataclass
class SynthesisResult:
    final: torch.Tensor  # (B, 3, H, W) in [0, 1]
    raw_rgb: torch.Tensor  # (B, 3, h, w), background composited
    renders: list[RenderOutput]
    triplanes: torch.Tensor  # (B, 3, C, R, R)


class _TriplaneSynthesis(nn.Module):
    def __init__(self, cfg: GeneratorConfig, rng, dtype):
        super().__init__()
        n_blocks = cfg.n_triplane_layers - 1
        self.n_up = int(np.log2(cfg.triplane_resolution / 4))
        self.const = nn.Parameter(
            torch.from_numpy(rng.standard_normal((cfg.base_channels, 4, 4))).to(dtype)
        )
        self.blocks = nn.ModuleList(
            StyleBlock(cfg.base_channels, cfg.base_channels, cfg.w_dim, rng, dtype=dtype)
            for _ in range(n_blocks)
        )
        self.to_planes = ModulatedConv2d(
            cfg.base_channels, 3 * cfg.triplane_channels, 1, cfg.w_dim, rng,
            demodulate=False, dtype=dtype,
        )

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        b = codes.shape[0]
        x = self.const.unsqueeze(0).expand(b, -1, -1, -1)
        for i, block in enumerate(self.blocks):
            if i < self.n_up:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(x, codes[:, i])
        return self.to_planes(x, codes[:, -1])


class _SuperResolution(nn.Module):
    def __init__(self, cfg: GeneratorConfig, rng, dtype):
        super().__init__()
        self.n_up = int(np.log2(cfg.final_resolution / cfg.raw_resolution))
        self.blocks = nn.ModuleList(
            StyleBlock(cfg.feature_dim, cfg.feature_dim, cfg.w_dim, rng, dtype=dtype)
            for _ in range(cfg.n_superres_layers - 1)
        )
        self.to_rgb = ModulatedConv2d(
            cfg.feature_dim, 3, 1, cfg.w_dim, rng, demodulate=False, dtype=dtype
        )

    def forward(self, feats: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
        x = feats
        for i, block in enumerate(self.blocks):
            if i < self.n_up:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(x, codes[:, i])
        return torch.sigmoid(self.to_rgb(x, codes[:, -1]))


class Generator3D(nn.Module):
    """The full pose-conditioned generator; one instance owns one parameter set."""

    def __init__(self, cfg: GeneratorConfig, seed: int, dtype=torch.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        rng = rng_from(seed, "generator3d")
        self.mapping = MappingNetwork(
            cfg.z_dim, cfg.w_dim, cfg.mapping_layers, rng,
            label_dim=cfg.label_dim, dtype=dtype,
        )
        self.synthesis = _TriplaneSynthesis(cfg, rng, dtype)
        self.decoder = FieldDecoder(
            3 * cfg.triplane_channels, cfg.feature_dim, cfg.decoder_hidden,
            rng=rng, dtype=dtype,
        )
        self.superres = _SuperResolution(cfg, rng, dtype)

    # latent plumbing -------------------------------------------------

    def map_latent(self, z: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        """(B, z_dim) + (B, 25) conditioning label -> (B, w_dim)."""
        if not torch.isfinite(z).all():
            raise ValueError("latent contains non-finite values")
        return self.mapping(z.to(self.dtype), label.to(self.dtype))

    def broadcast_w(self, w: torch.Tensor, layers: int | None = None) -> torch.Tensor:
        """(B, w_dim) -> (B, L, w_dim) with all codes equal."""
        layers = self.cfg.layer_count if layers is None else layers
        if layers < 1:
            raise ValueError("layer count must be >= 1")
        return w.unsqueeze(1).expand(-1, layers, -1)

    # synthesis -------------------------------------------------------

    def make_triplanes(self, wplus: torch.Tensor) -> torch.Tensor:
        """(B, L, w_dim) -> (B, 3, C, R, R); uses only the tri-plane codes."""
        self._check_codes(wplus)
        k_tri = self.cfg.n_triplane_layers
        planes = self.synthesis(wplus[:, :k_tri])
        b = planes.shape[0]
        c = self.cfg.triplane_channels
        r = self.cfg.triplane_resolution
        return planes.reshape(b, 3, c, r, r)

    def synthesize(
        self,
        wplus: torch.Tensor,
        poses: list[CameraPose] | CameraPose,
        rng_state: int | None = None,
    ) -> SynthesisResult:
        """Render each latent stack at its pose and super-resolve.

        A single pose is broadcast over the batch. `rng_state` seeds the
        per-item stratified sampling; None renders at bin midpoints.
        """
        self._check_codes(wplus)
        b = wplus.shape[0]
        if isinstance(poses, CameraPose):
            poses = [poses] * b
        if len(poses) != b:
            raise ValueError(f"got {len(poses)} poses for batch of {b}")
        k_tri = self.cfg.n_triplane_layers
        planes = self.make_triplanes(wplus)
        res = self.cfg.raw_resolution
        rays_list = [generate_rays(p, (res, res)) for p in poses]
        states = [
            None if rng_state is None else derive_seed(rng_state, "render", i)
            for i in range(b)
        ]
        renders = volume_render_triplane_batch(
            planes, self.decoder, rays_list, self.cfg.n_render_samples, states
        )
        feats = [composite_background(out, BACKGROUND_VALUE) for out in renders]
        feat_imgs = torch.stack(feats)  # (B, F, h, w)
        raw_rgb = feat_imgs[:, :3]
        final = self.superres(feat_imgs, wplus[:, k_tri:])
        return SynthesisResult(final=final, raw_rgb=raw_rgb, renders=renders, triplanes=planes)

    def synthesize_from_w(self, w, poses, rng_state=None) -> SynthesisResult:
        return self.synthesize(self.broadcast_w(w), poses, rng_state)

    def generate(
        self,
        z: torch.Tensor,
        render_pose: CameraPose,
        cond_label: PoseLabel | None = None,
        rng_state: int | None = None,
    ) -> SynthesisResult:
        """z -> w (conditioned on the label, default: the rendering pose) -> image."""
        label = pose_to_label(render_pose) if cond_label is None else cond_label
        lab = torch.as_tensor(label.as_array(), dtype=self.dtype).expand(z.shape[0], -1)
        w = self.map_latent(z, lab)
        return self.synthesize_from_w(w, render_pose, rng_state)

    def _check_codes(self, wplus: torch.Tensor) -> None:
        if wplus.ndim != 3 or wplus.shape[1] != self.cfg.layer_count:
            raise ValueError(
                f"latent stack must be (B, {self.cfg.layer_count}, {self.cfg.w_dim}), "
                f"got {tuple(wplus.shape)}"
            )


def update_ema(ema: Generator3D, live: Generator3D, decay: float) -> None:
    """ema <- decay * ema + (1 - decay) * live, elementwise."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must be in [0, 1), got {decay}")
    with torch.no_grad():
        for pe, pl in zip(ema.parameters(), live.parameters()):
            pe.mul_(decay).add_(pl, alpha=1.0 - decay)
        for be, bl in zip(ema.buffers(), live.buffers()):
            be.copy_(bl)
