"""Tri-plane neural field evaluation and differentiable volume rendering.

The field is defined on the unit cube [-1, 1]^3 by three axis-aligned
feature planes (XY, XZ, YZ). A point is projected onto each plane,
bilinearly interpolated, and the three feature vectors are concatenated
before a small MLP decodes density and a feature vector whose first three
channels are raw RGB.

Rendering uses the standard emission-absorption model with single-pass
stratified sampling:

    alpha_i = 1 - exp(-sigma_i * delta_i)
    w_i     = alpha_i * prod_{j<i} (1 - alpha_j)

so per-ray weights are non-negative and sum to at most one. Everything is
plain torch, differentiable w.r.t. plane values and decoder weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .camera import RayBundle
from .rng import normal_tensor

__all__ = [
    "TriPlane",
    "FieldSample",
    "RenderOutput",
    "FieldDecoder",
    "sample_triplane",
    "decode_field",
    "volume_render",
    "volume_render_field",
    "composite_background",
    "stratified_offsets",
]

# Plane projections: feature plane k reads point coordinates (cols[k], rows[k]).
_PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ

BACKGROUND_VALUE = 0.5


@dataclass
class TriPlane:
    """Three feature planes stored as one (3, C, R, R) tensor."""

    planes: torch.Tensor

    def __post_init__(self):
        if self.planes.ndim != 4 or self.planes.shape[0] != 3:
            raise ValueError(f"planes must be (3, C, R, R), got {tuple(self.planes.shape)}")
        if self.planes.shape[2] != self.planes.shape[3]:
            raise ValueError("planes must be square")

    @property
    def channels(self) -> int:
        return self.planes.shape[1]

    @property
    def resolution(self) -> int:
        return self.planes.shape[2]


@dataclass
class FieldSample:
    """Decoded field at a set of points: density (N,), feature (N, F)."""

    density: torch.Tensor
    feature: torch.Tensor


@dataclass
class RenderOutput:
    """Raw volume-rendering result, background not yet composited."""

    feature_image: torch.Tensor  # (F, H, W)
    raw_rgb: torch.Tensor  # (3, H, W), first three feature channels
    depth: torch.Tensor  # (H, W), expected termination depth
    accumulated_alpha: torch.Tensor  # (H, W) in [0, 1]


def sample_triplane(tp: TriPlane, points: torch.Tensor) -> torch.Tensor:
    """Bilinear tri-plane lookup; returns (N, 3C) concatenated features.

    Points outside the unit cube are clamped to its boundary before
    projection, which keeps the field continuous at the border.
    """
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {tuple(points.shape)}")
    if not torch.isfinite(points).all():
        raise ValueError("points contain non-finite values")
    res = tp.resolution
    pts = points.clamp(-1.0, 1.0)
    outs = []
    for k, (ax_col, ax_row) in enumerate(_PLANE_AXES):
        plane = tp.planes[k]  # (C, R, R)
        gs = (pts[:, ax_col] + 1.0) * 0.5 * (res - 1)
        gt = (pts[:, ax_row] + 1.0) * 0.5 * (res - 1)
        outs.append(_bilinear(plane, gs, gt))
    return torch.cat(outs, dim=1)


def _bilinear(plane: torch.Tensor, gs: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Sample (C, R, R) plane at fractional grid coords; returns (N, C)."""
    res = plane.shape[-1]
    s0 = gs.floor().clamp(0, res - 2).long()
    t0 = gt.floor().clamp(0, res - 2).long()
    fs = (gs - s0.to(gs.dtype)).clamp(0.0, 1.0)
    ft = (gt - t0.to(gt.dtype)).clamp(0.0, 1.0)
    flat = plane.reshape(plane.shape[0], -1)

    def node(ti, si):
        return flat.index_select(1, (ti * res + si)).transpose(0, 1)  # (N, C)

    f00 = node(t0, s0)
    f01 = node(t0, s0 + 1)
    f10 = node(t0 + 1, s0)
    f11 = node(t0 + 1, s0 + 1)
    fs = fs.unsqueeze(1)
    ft = ft.unsqueeze(1)
    top = f00 * (1 - fs) + f01 * fs
    bot = f10 * (1 - fs) + f11 * fs
    return top * (1 - ft) + bot * ft


class FieldDecoder(nn.Module):
    """Small MLP turning concatenated plane features into (density, feature).

    Density uses softplus(logit - 1) so a zero-initialized network starts
    nearly transparent; the first three feature channels pass through a
    sigmoid and act as raw RGB.
    """

    def __init__(self, in_dim: int, feature_dim: int = 16, hidden: int = 32,
                 rng: np.random.Generator | None = None, dtype=torch.float32):
        super().__init__()
        if feature_dim < 3:
            raise ValueError("feature_dim must be >= 3 (first 3 channels are RGB)")
        self.in_dim = in_dim
        self.feature_dim = feature_dim
        self.fc1 = nn.Linear(in_dim, hidden, dtype=dtype)
        self.fc2 = nn.Linear(hidden, 1 + feature_dim, dtype=dtype)
        if rng is not None:
            with torch.no_grad():
                self.fc1.weight.copy_(normal_tensor((hidden, in_dim), rng, in_dim ** -0.5, dtype))
                self.fc1.bias.zero_()
                self.fc2.weight.copy_(normal_tensor((1 + feature_dim, hidden), rng, hidden ** -0.5, dtype))
                self.fc2.bias.zero_()

    def forward(self, features: torch.Tensor) -> FieldSample:
        if features.shape[-1] != self.in_dim:
            raise ValueError(
                f"feature dim {features.shape[-1]} does not match decoder input {self.in_dim}"
            )
        h = torch.nn.functional.silu(self.fc1(features))
        out = self.fc2(h)
        density = torch.nn.functional.softplus(out[..., 0] - 1.0)
        rgb = torch.sigmoid(out[..., 1:4])
        feat = torch.cat([rgb, out[..., 4:]], dim=-1)
        return FieldSample(density=density, feature=feat)


def decode_field(features: torch.Tensor, decoder: FieldDecoder) -> FieldSample:
    return decoder(features)


def stratified_offsets(rng_state: int | None, shape: tuple[int, ...]) -> np.ndarray:
    """Per-sample jitter in [0, 1): counter-based, reproducible, or midpoints."""
    if rng_state is None:
        return np.full(shape, 0.5)
    gen = np.random.Generator(np.random.Philox(key=int(rng_state)))
    return gen.random(shape)


def volume_render_field(
    field_fn: Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor]],
    rays: RayBundle,
    n_samples: int,
    rng_state: int | None = None,
    dtype=torch.float32,
) -> RenderOutput:
    """Emission-absorption rendering of an arbitrary field.

    `field_fn` maps points (N, 3) to (density (N,), features (N, F)).
    """
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    h, w = rays.shape
    near, far = rays.near, rays.far
    origins = torch.as_tensor(rays.origins, dtype=dtype).reshape(-1, 3)
    dirs = torch.as_tensor(rays.directions, dtype=dtype).reshape(-1, 3)
    n_rays = origins.shape[0]

    # One stratified sample per bin; each sample stands for its whole bin,
    # so delta_i is the bin width (second-order accurate at midpoints).
    edges = np.linspace(near, far, n_samples + 1)
    bin_lo = edges[:-1]
    bin_width = edges[1:] - edges[:-1]
    offs = stratified_offsets(rng_state, (h, w, n_samples)).reshape(n_rays, n_samples)
    t_np = bin_lo[None, :] + offs * bin_width[None, :]
    t = torch.as_tensor(t_np, dtype=dtype)
    deltas = torch.as_tensor(bin_width, dtype=dtype).unsqueeze(0).expand_as(t)

    pts = origins.unsqueeze(1) + dirs.unsqueeze(1) * t.unsqueeze(-1)  # (N, S, 3)
    density, feats = field_fn(pts.reshape(-1, 3))
    density = density.reshape(n_rays, n_samples)
    feats = feats.reshape(n_rays, n_samples, -1)

    alpha = 1.0 - torch.exp(-density * deltas)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[:, :1]), 1.0 - alpha[:, :-1]], dim=1), dim=1
    )
    weights = alpha * trans  # (N, S)

    feature_image = (weights.unsqueeze(-1) * feats).sum(dim=1)  # (N, F)
    acc = weights.sum(dim=1)
    depth = (weights * t).sum(dim=1) / acc.clamp(min=1e-10)

    f_dim = feature_image.shape[-1]
    feature_image = feature_image.transpose(0, 1).reshape(f_dim, h, w)
    return RenderOutput(
        feature_image=feature_image,
        raw_rgb=feature_image[:3],
        depth=depth.reshape(h, w),
        accumulated_alpha=acc.reshape(h, w),
    )


def volume_render(
    tp: TriPlane,
    decoder: FieldDecoder,
    rays: RayBundle,
    n_samples: int,
    rng_state: int | None = None,
) -> RenderOutput:
    """Render a tri-plane field along a ray bundle."""

    def field_fn(points: torch.Tensor):
        sample = decoder(sample_triplane(tp, points))
        return sample.density, sample.feature

    return volume_render_field(field_fn, rays, n_samples, rng_state, dtype=tp.planes.dtype)


def sample_triplane_batch(planes: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Batched bilinear lookup: planes (B, 3, C, R, R), points (B, N, 3) -> (B, N, 3C)."""
    b, _, c, res, _ = planes.shape
    pts = points.clamp(-1.0, 1.0)
    outs = []
    for k, (ax_col, ax_row) in enumerate(_PLANE_AXES):
        flat = planes[:, k].reshape(b, c, res * res)
        gs = (pts[..., ax_col] + 1.0) * 0.5 * (res - 1)  # (B, N)
        gt = (pts[..., ax_row] + 1.0) * 0.5 * (res - 1)
        s0 = gs.floor().clamp(0, res - 2).long()
        t0 = gt.floor().clamp(0, res - 2).long()
        fs = (gs - s0.to(gs.dtype)).clamp(0.0, 1.0).unsqueeze(1)  # (B, 1, N)
        ft = (gt - t0.to(gt.dtype)).clamp(0.0, 1.0).unsqueeze(1)

        def node(ti, si):
            idx = (ti * res + si).unsqueeze(1).expand(-1, c, -1)  # (B, C, N)
            return flat.gather(2, idx)

        f00 = node(t0, s0)
        f01 = node(t0, s0 + 1)
        f10 = node(t0 + 1, s0)
        f11 = node(t0 + 1, s0 + 1)
        top = f00 * (1 - fs) + f01 * fs
        bot = f10 * (1 - fs) + f11 * fs
        outs.append((top * (1 - ft) + bot * ft).transpose(1, 2))  # (B, N, C)
    return torch.cat(outs, dim=2)


def volume_render_triplane_batch(
    planes: torch.Tensor,
    decoder: FieldDecoder,
    rays_list: list[RayBundle],
    n_samples: int,
    rng_states: list[int | None],
) -> list[RenderOutput]:
    """Render a batch of tri-planes, one ray bundle and jitter stream each.

    Functionally the per-item render, with the plane lookups and decoder
    evaluated in one batched pass.
    """
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    b = planes.shape[0]
    if len(rays_list) != b or len(rng_states) != b:
        raise ValueError("need one ray bundle and one rng state per batch item")
    dtype = planes.dtype
    h, w = rays_list[0].shape
    n_rays = h * w
    origins = torch.stack(
        [torch.as_tensor(r.origins, dtype=dtype).reshape(-1, 3) for r in rays_list]
    )
    dirs = torch.stack(
        [torch.as_tensor(r.directions, dtype=dtype).reshape(-1, 3) for r in rays_list]
    )
    t_all, d_all = [], []
    for r, state in zip(rays_list, rng_states):
        edges = np.linspace(r.near, r.far, n_samples + 1)
        offs = stratified_offsets(state, (h, w, n_samples)).reshape(n_rays, n_samples)
        t_all.append(edges[:-1][None, :] + offs * np.diff(edges)[None, :])
        d_all.append(np.broadcast_to(np.diff(edges), (n_rays, n_samples)))
    t = torch.as_tensor(np.stack(t_all), dtype=dtype)  # (B, Nr, S)
    deltas = torch.as_tensor(np.array(d_all), dtype=dtype)

    pts = origins.unsqueeze(2) + dirs.unsqueeze(2) * t.unsqueeze(-1)  # (B, Nr, S, 3)
    feats_in = sample_triplane_batch(planes, pts.reshape(b, -1, 3))
    sample = decoder(feats_in.reshape(b * n_rays * n_samples, -1))
    density = sample.density.reshape(b, n_rays, n_samples)
    feats = sample.feature.reshape(b, n_rays, n_samples, -1)

    alpha = 1.0 - torch.exp(-density * deltas)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[..., :1]), 1.0 - alpha[..., :-1]], dim=-1), dim=-1
    )
    weights = alpha * trans
    feature_image = (weights.unsqueeze(-1) * feats).sum(dim=2)  # (B, Nr, F)
    acc = weights.sum(dim=2)
    depth = (weights * t).sum(dim=2) / acc.clamp(min=1e-10)

    f_dim = feature_image.shape[-1]
    outs = []
    for i in range(b):
        fi = feature_image[i].transpose(0, 1).reshape(f_dim, h, w)
        outs.append(
            RenderOutput(
                feature_image=fi,
                raw_rgb=fi[:3],
                depth=depth[i].reshape(h, w),
                accumulated_alpha=acc[i].reshape(h, w),
            )
        )
    return outs


def composite_background(out: RenderOutput, value: float = BACKGROUND_VALUE) -> torch.Tensor:
    """Composite the feature image over a constant background; returns (F, H, W)."""
    return out.feature_image + (1.0 - out.accumulated_alpha).unsqueeze(0) * value
