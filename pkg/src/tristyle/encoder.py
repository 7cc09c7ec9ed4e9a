"""Latent-stack encoder: image -> per-layer latent codes, plus its losses.

A headless pyramid backbone produces three feature levels; each level's
sub-encoder emits a slice of the latent stack (deep features drive the
coarse tri-plane codes, shallow features the super-resolution codes).

Training combines, against a frozen generator:
  - multi-view cycle consistency: codes of a known in-domain stack must be
    recovered from renders of it at arbitrary cameras,
  - reconstruction: pixel + perceptual + identity terms between the input
    and its re-synthesis at the input's own camera,
  - divergence regularization: the stack's per-layer offsets from its mean
    code, zero exactly on broadcast (w-space) stacks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .camera import PoseDistributionConfig, PoseLabel, frontal_pose, label_to_pose, pose_to_label, sample_pose
from .errors import ConfigError, DataError
from .generator import Generator3D
from .networks import EqualizedConv2d, EqualizedLinear
from .perceptual import (
    FrozenFeatureExtractor,
    IdentityEmbedder,
    identity_cosine,
    perceptual_distance,
)
from .rng import derive_seed, normal_tensor, rng_from

__all__ = [
    "EncoderConfig",
    "EncoderTrainConfig",
    "PyramidEncoder",
    "loss_regularization",
    "loss_cycle_with_poses",
    "loss_cycle",
    "loss_reconstruction",
    "train_encoder",
]


@dataclass(frozen=True)
class EncoderConfig:
    resolution: int = 64
    base_channels: int = 32


@dataclass(frozen=True)
class EncoderTrainConfig:
    epochs: int = 4
    batch_size: int = 2
    lr: float = 5e-4
    lambda_rec: float = 1.0
    lambda_cyc: float = 1.0
    lambda_reg: float = 0.001
    lambda_l2: float = 1.0
    lambda_lpips: float = 0.8
    lambda_arc: float = 0.1
    n_cycle_poses: int = 2
    log_every: int = 64


class PyramidEncoder(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig, layer_count: int, w_dim: int,
                 seed: int, dtype=torch.float32):
        super().__init__()
        self.cfg = enc_cfg
        self.layer_count = layer_count
        self.w_dim = w_dim
        c = enc_cfg.base_channels
        rng = rng_from(seed, "encoder")
        self.stem = EqualizedConv2d(3, c, 3, rng, dtype=dtype)
        self.down1 = EqualizedConv2d(c, c * 2, 3, rng, stride=2, dtype=dtype)
        self.down2 = EqualizedConv2d(c * 2, c * 4, 3, rng, stride=2, dtype=dtype)
        self.down3 = EqualizedConv2d(c * 4, c * 4, 3, rng, stride=2, dtype=dtype)
        # deep level -> first (coarse) codes, shallow level -> last codes
        groups = np.array_split(np.arange(layer_count), 3)
        self.group_sizes = [len(g) for g in groups]
        level_dims = [c * 4, c * 4, c * 2]  # deep, mid, shallow
        self.heads = nn.ModuleList(
            _SubEncoder(dim, n_codes, w_dim, rng, dtype)
            for dim, n_codes in zip(level_dims, self.group_sizes)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, R, R) image in [0, 1] -> latent stack (B, L, w_dim)."""
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[-1] != self.cfg.resolution \
                or x.shape[-2] != self.cfg.resolution:
            raise ValueError(
                f"expected (B, 3, {self.cfg.resolution}, {self.cfg.resolution}), "
                f"got {tuple(x.shape)}"
            )
        h = F.silu(self.stem(x))
        lvl1 = F.silu(self.down1(h))     # shallow
        lvl2 = F.silu(self.down2(lvl1))  # mid
        lvl3 = F.silu(self.down3(lvl2))  # deep
        parts = [
            self.heads[0](lvl3),
            self.heads[1](lvl2),
            self.heads[2](lvl1),
        ]
        return torch.cat(parts, dim=1)

    encode = forward


class _SubEncoder(nn.Module):
    def __init__(self, in_dim: int, n_codes: int, w_dim: int, rng, dtype):
        super().__init__()
        self.n_codes = n_codes
        self.w_dim = w_dim
        self.conv = EqualizedConv2d(in_dim, in_dim, 3, rng, dtype=dtype)
        self.fc = EqualizedLinear(in_dim, n_codes * w_dim, rng, dtype=dtype)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        x = F.silu(self.conv(feats))
        pooled = x.mean(dim=(2, 3))
        return self.fc(pooled).reshape(-1, self.n_codes, self.w_dim)


# ---------------------------------------------------------------------------
# losses


def loss_regularization(wplus: torch.Tensor) -> torch.Tensor:
    """L2 norm of the per-layer offsets from the cross-layer mean code.

    Zero exactly when all codes are equal (w-space stacks); invariant to
    layer permutation. Batches are averaged.
    """
    mean = wplus.mean(dim=-2, keepdim=True)
    offsets = wplus - mean
    return offsets.reshape(wplus.shape[0], -1).norm(dim=-1).mean()


def loss_cycle_with_poses(
    encoder: PyramidEncoder,
    gen: Generator3D,
    wplus: torch.Tensor,
    poses: list,
    render_seed: int | None = None,
) -> torch.Tensor:
    """Sum over poses of the squared code error after render + re-encode."""
    total = wplus.new_zeros(())
    for i, pose in enumerate(poses):
        state = None if render_seed is None else derive_seed(render_seed, "cycle", i)
        res = gen.synthesize(wplus, pose, rng_state=state)
        codes = encoder(res.final)
        total = total + (codes - wplus).pow(2).sum(dim=(1, 2)).mean()
    return total


def loss_cycle(
    encoder: PyramidEncoder,
    gen: Generator3D,
    rng_state: int,
    n_poses: int,
    pose_dist: PoseDistributionConfig,
    batch_size: int = 2,
) -> torch.Tensor:
    """Draw latents, map with the fixed frontal label, broadcast, render at
    random cameras, and require the encoder to reproduce the stack."""
    if n_poses < 1:
        raise ValueError("need at least one cycle pose")
    z = normal_tensor((batch_size, gen.cfg.z_dim), rng_from(rng_state, "z"))
    frontal = pose_to_label(frontal_pose(pose_dist))
    label = torch.as_tensor(frontal.as_array(), dtype=gen.dtype).expand(batch_size, -1)
    with torch.no_grad():
        w = gen.map_latent(z, label)
    wplus = gen.broadcast_w(w).detach()
    poses = [
        sample_pose(rng_from(rng_state, "pose", i), pose_dist) for i in range(n_poses)
    ]
    return loss_cycle_with_poses(encoder, gen, wplus, poses, render_seed=rng_state)


def loss_reconstruction(
    x: torch.Tensor,
    gen: Generator3D,
    pose_labels: list[PoseLabel],
    encoder: PyramidEncoder,
    extractor: FrozenFeatureExtractor,
    identity: IdentityEmbedder | None,
    lambda_l2: float = 1.0,
    lambda_lpips: float = 0.8,
    lambda_arc: float = 0.1,
    render_seed: int | None = None,
) -> tuple[torch.Tensor, dict]:
    """Pixel + perceptual + identity reconstruction at the input's own pose."""
    if len(pose_labels) != x.shape[0]:
        raise DataError("need one pose label per image")
    codes = encoder(x)
    poses = [label_to_pose(lbl) for lbl in pose_labels]
    xhat = gen.synthesize(codes, poses, rng_state=render_seed).final
    l2 = (x - xhat).pow(2).mean()
    lp = perceptual_distance(extractor, x, xhat).mean()
    parts = {"l2": float(l2.item()), "lpips": float(lp.item())}
    total = lambda_l2 * l2 + lambda_lpips * lp
    if identity is not None and lambda_arc > 0:
        arc = (1.0 - identity_cosine(identity, x, xhat)).mean()
        parts["arc"] = float(arc.item())
        total = total + lambda_arc * arc
    return total, parts


# ---------------------------------------------------------------------------
# training


def _require_frozen(module: nn.Module, name: str) -> None:
    if any(p.requires_grad for p in module.parameters()):
        raise ConfigError(f"{name} must be frozen (requires_grad=False) for this stage")


def train_encoder(
    images: torch.Tensor,
    pose_labels: list[PoseLabel],
    gen: Generator3D,
    pose_dist: PoseDistributionConfig,
    extractor: FrozenFeatureExtractor,
    identity: IdentityEmbedder | None,
    enc_cfg: EncoderConfig,
    train_cfg: EncoderTrainConfig,
    seed: int,
) -> tuple[PyramidEncoder, list[dict]]:
    """Optimize the encoder against a frozen generator; returns history too."""
    if images.shape[0] == 0:
        raise DataError("empty encoder training set")
    _require_frozen(gen, "generator")
    encoder = PyramidEncoder(
        enc_cfg, gen.cfg.layer_count, gen.cfg.w_dim, seed=derive_seed(seed, "enc-init")
    )
    opt = torch.optim.RAdam(encoder.parameters(), lr=train_cfg.lr)
    rng = rng_from(seed, "enc-train")
    n = images.shape[0]
    bs = min(train_cfg.batch_size, n)
    steps_per_epoch = max(n // bs, 1)
    history = []
    step = 0
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = perm[b * bs : (b + 1) * bs]
            x = images[torch.from_numpy(idx)]
            labels = [pose_labels[i] for i in idx]
            rec, parts = loss_reconstruction(
                x, gen, labels, encoder, extractor, identity,
                train_cfg.lambda_l2, train_cfg.lambda_lpips, train_cfg.lambda_arc,
                render_seed=derive_seed(seed, "rec", step),
            )
            reg = loss_regularization(encoder(x))
            total = train_cfg.lambda_rec * rec + train_cfg.lambda_reg * reg
            if train_cfg.lambda_cyc > 0:
                cyc = loss_cycle(
                    encoder, gen, derive_seed(seed, "cyc", step),
                    train_cfg.n_cycle_poses, pose_dist, batch_size=bs,
                )
                total = total + train_cfg.lambda_cyc * cyc
            else:
                cyc = torch.zeros(())
            opt.zero_grad()
            total.backward()
            opt.step()
            if step % train_cfg.log_every == 0 or (
                epoch == train_cfg.epochs - 1 and b == steps_per_epoch - 1
            ):
                history.append(
                    {
                        "epoch": epoch,
                        "step": step,
                        "total": float(total.item()),
                        "rec": float(rec.item()),
                        "cyc": float(cyc.item()),
                        "reg": float(reg.item()),
                        **parts,
                    }
                )
            step += 1
    return encoder, history
