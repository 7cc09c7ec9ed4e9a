"""2D style prior: a compact style-modulated generator and its training.

The prior is pretrained adversarially on the synthetic "real" images, then
fine-tuned on a handful of stylized exemplars. Because base and fine-tuned
generators share the latent space, sampling one latent from both yields an
aligned (real, stylized) pair for free; pose labels are attached from the
real dataset's ground-truth label distribution. These pairs drive both the
3D transfer adversarial objective and the paired guidance loss.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adversarial import (
    Discriminator,
    DiscriminatorConfig,
    loss_d_hinge,
    loss_g_nonsat,
    r1_penalty,
)
from .errors import DataError
from .images import file_sha256, load_png, save_png
from .networks import MappingNetwork, ModulatedConv2d, StyleBlock
from .rng import derive_seed, normal_tensor, rng_from

__all__ = [
    "Prior2DConfig",
    "GanTrainingConfig",
    "Generator2D",
    "Prior2D",
    "StylePair",
    "pretrain_prior2d",
    "finetune_prior2d",
    "generate_style_pairs",
    "save_style_pairs",
    "load_style_pairs",
]


@dataclass(frozen=True)
class Prior2DConfig:
    z_dim: int = 64
    w_dim: int = 64
    mapping_layers: int = 4
    n_layers: int = 6  # 5 style blocks + modulated toRGB
    base_channels: int = 32
    resolution: int = 64


@dataclass(frozen=True)
class GanTrainingConfig:
    steps: int = 800
    batch_size: int = 8
    lr: float = 2e-3
    r1_gamma: float = 1.0
    r1_interval: int = 16
    ema_decay: float = 0.98
    log_every: int = 50


class Generator2D(nn.Module):
    def __init__(self, cfg: Prior2DConfig, seed: int, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        rng = rng_from(seed, "generator2d")
        self.mapping = MappingNetwork(cfg.z_dim, cfg.w_dim, cfg.mapping_layers, rng, dtype=dtype)
        n_blocks = cfg.n_layers - 1
        self.n_up = int(np.log2(cfg.resolution / 4))
        if self.n_up > n_blocks:
            raise ValueError("not enough layers for the target resolution")
        self.const = nn.Parameter(
            torch.from_numpy(rng.standard_normal((cfg.base_channels, 4, 4))).to(dtype)
        )
        self.blocks = nn.ModuleList(
            StyleBlock(cfg.base_channels, cfg.base_channels, cfg.w_dim, rng, dtype=dtype)
            for _ in range(n_blocks)
        )
        self.to_rgb = ModulatedConv2d(cfg.base_channels, 3, 1, cfg.w_dim, rng,
                                      demodulate=False, dtype=dtype)

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(z)

    def synthesize_from_w(self, w: torch.Tensor) -> torch.Tensor:
        b = w.shape[0]
        x = self.const.unsqueeze(0).expand(b, -1, -1, -1)
        for i, block in enumerate(self.blocks):
            if i < self.n_up:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(x, w)
        return torch.sigmoid(self.to_rgb(x, w))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.synthesize_from_w(self.map_latent(z))


@dataclass
class Prior2D:
    """Base or fine-tuned prior: generator, its EMA copy, and a discriminator."""

    gen: Generator2D
    gen_ema: Generator2D
    disc: Discriminator
    config: Prior2DConfig
    history: list[dict]

    def sample(self, z: torch.Tensor, use_ema: bool = True) -> torch.Tensor:
        g = self.gen_ema if use_ema else self.gen
        with torch.no_grad():
            return g(z)


def _update_ema_module(ema: nn.Module, live: nn.Module, decay: float) -> None:
    with torch.no_grad():
        for pe, pl in zip(ema.parameters(), live.parameters()):
            pe.mul_(decay).add_(pl, alpha=1.0 - decay)


def _train_gan_2d(
    gen: Generator2D,
    gen_ema: Generator2D,
    disc: Discriminator,
    images: torch.Tensor,
    train_cfg: GanTrainingConfig,
    seed: int,
) -> list[dict]:
    """Hinge-loss adversarial loop with lazy R1; returns the loss history."""
    rng = rng_from(seed, "gan2d")
    opt_g = torch.optim.Adam(gen.parameters(), lr=train_cfg.lr, betas=(0.0, 0.99))
    opt_d = torch.optim.Adam(disc.parameters(), lr=train_cfg.lr, betas=(0.0, 0.99))
    n = images.shape[0]
    bs = min(train_cfg.batch_size, n)
    history = []
    for step in range(train_cfg.steps):
        real = images[torch.from_numpy(rng.integers(0, n, size=bs))]
        z = normal_tensor((bs, gen.cfg.z_dim), rng)

        with torch.no_grad():
            fake = gen(z)
        d_loss = loss_d_hinge(disc(real), disc(fake))
        if train_cfg.r1_interval and step % train_cfg.r1_interval == 0:
            d_loss = d_loss + r1_penalty(disc, real, gamma=train_cfg.r1_gamma) * train_cfg.r1_interval
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        z = normal_tensor((bs, gen.cfg.z_dim), rng)
        g_loss = loss_g_nonsat(disc(gen(z)))
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
        _update_ema_module(gen_ema, gen, train_cfg.ema_decay)

        if step % train_cfg.log_every == 0 or step == train_cfg.steps - 1:
            history.append(
                {"step": step, "d_loss": float(d_loss.item()), "g_loss": float(g_loss.item())}
            )
    return history


def pretrain_prior2d(
    images: torch.Tensor,
    cfg: Prior2DConfig,
    train_cfg: GanTrainingConfig,
    seed: int,
) -> Prior2D:
    """Adversarially train the base 2D generator on real images (N, 3, R, R)."""
    if images.shape[0] == 0:
        raise DataError("empty real-image dataset")
    gen = Generator2D(cfg, seed=derive_seed(seed, "prior-g"))
    gen_ema = copy.deepcopy(gen)
    disc = Discriminator(
        DiscriminatorConfig(resolution=cfg.resolution, in_channels=3, label_dim=0),
        seed=derive_seed(seed, "prior-d"),
    )
    history = _train_gan_2d(gen, gen_ema, disc, images, train_cfg, derive_seed(seed, "prior-train"))
    return Prior2D(gen=gen, gen_ema=gen_ema, disc=disc, config=cfg, history=history)


def finetune_prior2d(
    base: Prior2D,
    exemplars: torch.Tensor,
    train_cfg: GanTrainingConfig,
    seed: int,
) -> Prior2D:
    """Fine-tune a copy of the base prior on few-shot exemplars (M, 3, R, R)."""
    if exemplars.shape[0] == 0:
        raise DataError("need at least one style exemplar")
    gen = copy.deepcopy(base.gen)
    gen_ema = copy.deepcopy(base.gen_ema)
    disc = copy.deepcopy(base.disc)
    history = _train_gan_2d(gen, gen_ema, disc, exemplars, train_cfg, derive_seed(seed, "finetune"))
    return Prior2D(gen=gen, gen_ema=gen_ema, disc=disc, config=base.config, history=history)


# ---------------------------------------------------------------------------
# pair generation


@dataclass(frozen=True)
class StylePair:
    """Aligned (real, stylized) images sharing one latent, plus the real
    image's camera label."""

    real: torch.Tensor
    stylized: torch.Tensor
    pose: tuple[float, ...]  # 25 numbers, owned by the real branch
    latent_seed: int


def generate_style_pairs(
    base: Prior2D,
    styled: Prior2D,
    pose_source: list[tuple[float, ...]],
    count: int,
    seed: int,
    batch_size: int = 32,
) -> list[StylePair]:
    """Sample `count` pairs: real = S(z), stylized = S_t(z), label from the
    real-image label distribution. Deterministic per (seed, index)."""
    if count == 0:
        return []
    if not pose_source:
        raise DataError("pose source is empty")
    pairs: list[StylePair] = []
    for start in range(0, count, batch_size):
        idxs = range(start, min(start + batch_size, count))
        item_seeds = [derive_seed(seed, "pair", i) for i in idxs]
        z = torch.stack(
            [normal_tensor((base.config.z_dim,), rng_from(s, "z")) for s in item_seeds]
        )
        pose_ids = [
            int(rng_from(s, "pose").integers(0, len(pose_source))) for s in item_seeds
        ]
        real = base.sample(z)
        stylized = styled.sample(z)
        for j, s in enumerate(item_seeds):
            pairs.append(
                StylePair(
                    real=real[j],
                    stylized=stylized[j],
                    pose=tuple(pose_source[pose_ids[j]]),
                    latent_seed=s,
                )
            )
    return pairs


def save_style_pairs(pairs: list[StylePair], out_path: str | Path, style_id: str = "default") -> None:
    """One record per pair: two PNGs plus a metadata line in the manifest."""
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as fh:
        fh.write(
            json.dumps(
                {"kind": "tristyle-pairs", "count": len(pairs), "style_id": style_id},
                sort_keys=True,
            )
            + "\n"
        )
        for i, p in enumerate(pairs):
            real_name = f"pair_{i:05d}_real.png"
            styl_name = f"pair_{i:05d}_styled.png"
            save_png(p.real, out / real_name)
            save_png(p.stylized, out / styl_name)
            fh.write(
                json.dumps(
                    {
                        "real": real_name,
                        "stylized": styl_name,
                        "pose": list(p.pose),
                        "latent_seed": p.latent_seed,
                        "style_id": style_id,
                        "real_hash": file_sha256(out / real_name),
                        "stylized_hash": file_sha256(out / styl_name),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_style_pairs(path: str | Path) -> list[StylePair]:
    root = Path(path)
    manifest = root / "manifest.json"
    if not manifest.exists():
        raise DataError(f"no pair manifest at {manifest}")
    with open(manifest) as fh:
        lines = [ln for ln in fh.readlines() if ln.strip()]
    pairs = []
    for ln in lines[1:]:
        obj = json.loads(ln)
        pairs.append(
            StylePair(
                real=load_png(root / obj["real"]),
                stylized=load_png(root / obj["stylized"]),
                pose=tuple(obj["pose"]),
                latent_seed=obj["latent_seed"],
            )
        )
    return pairs
