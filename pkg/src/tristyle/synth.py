"""Procedural 3D scenes, a deterministic style transform, dataset building.

Scenes stand in for real portrait photos: each identity is a soft ellipsoid
with a handful of feature blobs and a striped texture, all drawn from a
seeded identity distribution. Density and color are smooth closed forms, so
renders have analytic ground truth and every camera label is exact by
construction.

The style transform ("style oracle") is geometry preserving: a fixed hue
rotation, K-level posterization, and Sobel edge darkening. It supplies
few-shot exemplars and a ground-truth stylization for evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .camera import (
    CameraPose,
    PoseDistributionConfig,
    PoseLabel,
    default_near_far,
    pose_to_label,
    rays_from_matrices,
    sample_pose,
)
from .errors import DataError
from .images import file_sha256, load_png, save_png
from .renderer import RenderOutput, composite_background, volume_render_field
from .rng import derive_seed, rng_from

__all__ = [
    "SyntheticScene",
    "StyleOracleConfig",
    "DatasetRecord",
    "DatasetMeta",
    "scene_from_identity",
    "scene_field",
    "render_scene",
    "render_scene_from_label",
    "style_oracle",
    "edge_mask",
    "edge_overlap",
    "sobel_magnitude",
    "build_dataset",
    "load_manifest",
    "load_exemplar_records",
    "load_dataset_images",
    "build_exemplars",
]

CORE_DENSITY = 14.0
_SHELL_SHARPNESS = 40.0


@dataclass(frozen=True)
class SyntheticScene:
    """Parametric scene; a deterministic function of (identity_id, seed)."""

    identity_id: int
    semi_axes: tuple[float, float, float]
    blob_centers: tuple[tuple[float, float, float], ...]
    blob_sizes: tuple[float, ...]
    blob_amps: tuple[float, ...]
    base_color: tuple[float, float, float]
    second_color: tuple[float, float, float]
    blob_colors: tuple[tuple[float, float, float], ...]
    stripe_dir: tuple[float, float, float]
    stripe_freq: float
    stripe_phase: float


def scene_from_identity(identity_id: int, seed: int) -> SyntheticScene:
    rng = rng_from(seed, "scene", identity_id)
    semi = 0.38 + 0.17 * rng.random(3)
    n_blobs = int(rng.integers(2, 5))
    centers = (rng.random((n_blobs, 3)) - 0.5) * 0.9 * semi
    sizes = 0.06 + 0.08 * rng.random(n_blobs)
    amps = 2.0 + 4.0 * rng.random(n_blobs)
    # dark base / bright secondary keeps stripe and silhouette contrast high
    base = 0.05 + 0.35 * rng.random(3)
    second = 0.55 + 0.4 * rng.random(3)
    blob_colors = 0.05 + 0.9 * rng.random((n_blobs, 3))
    d = rng.standard_normal(3)
    d = d / np.linalg.norm(d)
    freq = float(4.0 + 6.0 * rng.random())
    phase = float(rng.random() * 2 * np.pi)
    return SyntheticScene(
        identity_id=identity_id,
        semi_axes=tuple(semi),
        blob_centers=tuple(map(tuple, centers)),
        blob_sizes=tuple(sizes),
        blob_amps=tuple(amps),
        base_color=tuple(base),
        second_color=tuple(second),
        blob_colors=tuple(map(tuple, blob_colors)),
        stripe_dir=tuple(d),
        stripe_freq=freq,
        stripe_phase=phase,
    )


def scene_field(scene: SyntheticScene, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Analytic density and RGB color at (N, 3) points; smooth everywhere."""
    pts = torch.as_tensor(points)
    dtype = pts.dtype
    semi = torch.tensor(scene.semi_axes, dtype=dtype)
    q = ((pts / semi) ** 2).sum(dim=-1)
    # soft ellipsoid shell, normalized so the density at the center is
    # exactly CORE_DENSITY
    shell = torch.sigmoid(_SHELL_SHARPNESS * (1.0 - q))
    density = CORE_DENSITY * shell / float(1.0 / (1.0 + np.exp(-_SHELL_SHARPNESS)))

    # two-tone stripes with steep (but smooth) transitions keep the texture
    # piecewise flat, so renders have crisp, well defined edge structure
    d = torch.tensor(scene.stripe_dir, dtype=dtype)
    m = torch.sigmoid(10.0 * torch.sin(scene.stripe_freq * (pts @ d) + scene.stripe_phase))
    base = torch.tensor(scene.base_color, dtype=dtype)
    second = torch.tensor(scene.second_color, dtype=dtype)
    color = base + (second - base) * m.unsqueeze(-1)

    for center, size, amp, bcol in zip(
        scene.blob_centers, scene.blob_sizes, scene.blob_amps, scene.blob_colors
    ):
        c = torch.tensor(center, dtype=dtype)
        r2 = ((pts - c) ** 2).sum(dim=-1)
        bump = torch.exp(-r2 / (2.0 * size * size))
        density = density + amp * bump
        mix = torch.sigmoid(8.0 * (bump - 0.4)).unsqueeze(-1)
        color = color + (torch.tensor(bcol, dtype=dtype) - color) * mix
    return density, color


def render_scene_from_label(
    scene: SyntheticScene,
    label: PoseLabel,
    resolution: tuple[int, int],
    n_samples: int,
    rng_state: int | None = None,
    dtype=torch.float32,
) -> tuple[torch.Tensor, RenderOutput]:
    """Render via the stored 25-number label; the dataset builder uses this
    exact path so a record always re-renders bit-identically from its label."""
    ext = label.extrinsic()
    radius = float(np.linalg.norm(ext[:3, 3]))
    near, far = default_near_far(radius)
    rays = rays_from_matrices(ext, label.intrinsic(), resolution, near, far)
    out = volume_render_field(
        lambda p: scene_field(scene, p), rays, n_samples, rng_state, dtype=dtype
    )
    img = composite_background(out)[:3].clamp(0.0, 1.0)
    return img, out


def render_scene(
    scene: SyntheticScene,
    pose: CameraPose,
    resolution: tuple[int, int],
    n_samples: int,
    rng_state: int | None = None,
    dtype=torch.float32,
) -> torch.Tensor:
    img, _ = render_scene_from_label(
        scene, pose_to_label(pose), resolution, n_samples, rng_state, dtype
    )
    return img


# ---------------------------------------------------------------------------
# style oracle


@dataclass(frozen=True)
class StyleOracleConfig:
    posterize_levels: int = 4
    hue_shift: float = 0.15  # radians around the gray axis; small enough that
    # palette colors survive a second pass (shift < half a quantization level)
    edge_threshold: float = 0.25
    edge_darken_levels: int = 1  # edge pixels drop this many palette levels


def _hue_rotation_matrix(angle: float) -> np.ndarray:
    """Rotation about the gray axis (1,1,1)/sqrt(3) in RGB space."""
    axis = np.ones(3) / np.sqrt(3.0)
    c, s = np.cos(angle), np.sin(angle)
    cross = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(axis, axis)


def sobel_magnitude(img: torch.Tensor) -> np.ndarray:
    """Sobel gradient magnitude of the grayscale of a (3, H, W) image."""
    gray = img.detach().cpu().numpy().astype(np.float64).mean(axis=0)
    gx = ndimage.sobel(gray, axis=0, mode="nearest")
    gy = ndimage.sobel(gray, axis=1, mode="nearest")
    return np.hypot(gx, gy)


def edge_mask(img: torch.Tensor, threshold: float = 0.25) -> np.ndarray:
    """Boolean Sobel-magnitude edge map of a (3, H, W) image."""
    return sobel_magnitude(img) > threshold


def edge_overlap(img_a: torch.Tensor, img_b: torch.Tensor,
                 quantile: float = 0.88, tolerance: int = 1) -> float:
    """IoU of the two images' edge maps, with localization tolerance.

    Edge maps are the top (1 - quantile) Sobel pixels of each image (equal
    pixel budgets, so the measure is not dominated by one image having more
    edge content), dilated by `tolerance` pixels before intersection, the
    usual way boundary maps are matched.
    """
    ma, mb = sobel_magnitude(img_a), sobel_magnitude(img_b)
    a = ma > np.quantile(ma, quantile)
    b = mb > np.quantile(mb, quantile)
    if tolerance:
        a = ndimage.binary_dilation(a, iterations=tolerance)
        b = ndimage.binary_dilation(b, iterations=tolerance)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / max(union, 1))


def style_oracle(img: torch.Tensor, cfg: StyleOracleConfig = StyleOracleConfig()) -> torch.Tensor:
    """Deterministic geometry-preserving stylization of a (3, H, W) image."""
    arr = img.detach().cpu().numpy().astype(np.float64)
    rot = _hue_rotation_matrix(cfg.hue_shift)
    shifted = np.einsum("ij,jhw->ihw", rot, arr)
    shifted = np.clip(shifted, 0.0, 1.0)

    k = cfg.posterize_levels - 1
    poster = np.round(shifted * k) / k

    mask = edge_mask(img, cfg.edge_threshold)
    poster[:, mask] = np.clip(poster[:, mask] - cfg.edge_darken_levels / k, 0.0, 1.0)
    return torch.from_numpy(poster).to(img.dtype)


# ---------------------------------------------------------------------------
# dataset serialization


@dataclass(frozen=True)
class DatasetRecord:
    file: str
    pose: tuple[float, ...]  # 25 numbers
    identity: int
    seed: int
    hash: str

    def pose_label(self) -> PoseLabel:
        return PoseLabel(self.pose)


@dataclass(frozen=True)
class DatasetMeta:
    seed: int
    identity_count: int
    resolution: tuple[int, int]
    n_samples: int
    pose: PoseDistributionConfig
    count: int


def _meta_to_json(meta: DatasetMeta) -> dict:
    return {
        "kind": "tristyle-dataset",
        "seed": meta.seed,
        "identity_count": meta.identity_count,
        "resolution": list(meta.resolution),
        "n_samples": meta.n_samples,
        "pose": {
            "yaw_range": list(meta.pose.yaw_range),
            "pitch_range": list(meta.pose.pitch_range),
            "radius": meta.pose.radius,
            "fov": meta.pose.fov,
            "look_at": list(meta.pose.look_at),
        },
        "count": meta.count,
    }


def _meta_from_json(obj: dict) -> DatasetMeta:
    pose = obj["pose"]
    return DatasetMeta(
        seed=obj["seed"],
        identity_count=obj["identity_count"],
        resolution=tuple(obj["resolution"]),
        n_samples=obj["n_samples"],
        pose=PoseDistributionConfig(
            yaw_range=tuple(pose["yaw_range"]),
            pitch_range=tuple(pose["pitch_range"]),
            radius=pose["radius"],
            fov=pose["fov"],
            look_at=tuple(pose["look_at"]),
        ),
        count=obj["count"],
    )


def build_dataset(
    n_images: int,
    identity_count: int,
    pose_distribution: PoseDistributionConfig,
    seed: int,
    out_path: str | Path,
    resolution: tuple[int, int] = (64, 64),
    n_samples: int = 48,
) -> list[DatasetRecord]:
    """Render a dataset; identity k % identity_count, per-record derived seeds.

    Writes one PNG per record plus `manifest.json` (header line, then one
    JSON record per line). Returns the records in order.
    """
    if n_images > 0 and identity_count < 1:
        raise DataError("identity_count must be >= 1")
    pose_distribution.validate()
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    meta = DatasetMeta(
        seed=seed,
        identity_count=identity_count,
        resolution=resolution,
        n_samples=n_samples,
        pose=pose_distribution,
        count=n_images,
    )
    records: list[DatasetRecord] = []
    for k in range(n_images):
        identity = k % identity_count
        rec_seed = derive_seed(seed, "record", k)
        pose = sample_pose(rng_from(rec_seed, "pose"), pose_distribution)
        label = pose_to_label(pose)
        scene = scene_from_identity(identity, seed)
        img, _ = render_scene_from_label(
            scene, label, resolution, n_samples, rng_state=derive_seed(rec_seed, "render")
        )
        name = f"img_{k:05d}.png"
        save_png(img, out / name)
        records.append(
            DatasetRecord(
                file=name,
                pose=label.values,
                identity=identity,
                seed=rec_seed,
                hash=file_sha256(out / name),
            )
        )
    with open(out / "manifest.json", "w") as fh:
        fh.write(json.dumps(_meta_to_json(meta), sort_keys=True) + "\n")
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "file": rec.file,
                        "pose": list(rec.pose),
                        "identity": rec.identity,
                        "seed": rec.seed,
                        "hash": rec.hash,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return records


def load_manifest(path: str | Path) -> tuple[DatasetMeta, list[DatasetRecord]]:
    path = Path(path)
    manifest = path / "manifest.json" if path.is_dir() else path
    if not manifest.exists():
        raise DataError(f"no manifest at {manifest}")
    with open(manifest) as fh:
        lines = [ln for ln in fh.readlines() if ln.strip()]
    meta = _meta_from_json(json.loads(lines[0]))
    return meta, _records_from_lines(lines[1:])


def _records_from_lines(lines: list[str]) -> list[DatasetRecord]:
    records = []
    for ln in lines:
        obj = json.loads(ln)
        records.append(
            DatasetRecord(
                file=obj["file"],
                pose=tuple(obj["pose"]),
                identity=obj["identity"],
                seed=obj["seed"],
                hash=obj["hash"],
            )
        )
    return records


def load_exemplar_records(path: str | Path) -> list[DatasetRecord]:
    manifest = Path(path) / "manifest.json"
    if not manifest.exists():
        raise DataError(f"no manifest at {manifest}")
    with open(manifest) as fh:
        lines = [ln for ln in fh.readlines() if ln.strip()]
    return _records_from_lines(lines[1:])


def load_dataset_images(
    root: str | Path, records: list[DatasetRecord], dtype=torch.float32
) -> torch.Tensor:
    root = Path(root)
    return torch.stack([load_png(root / r.file, dtype) for r in records])


def build_exemplars(
    m: int,
    seed: int,
    pose_distribution: PoseDistributionConfig,
    style_cfg: StyleOracleConfig,
    out_path: str | Path,
    identity_offset: int = 10_000,
    resolution: tuple[int, int] = (64, 64),
    n_samples: int = 48,
) -> list[DatasetRecord]:
    """Oracle-stylized held-out renders used as the few-shot style exemplars."""
    if m < 1:
        raise DataError("need at least one exemplar")
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for k in range(m):
        identity = identity_offset + k
        rec_seed = derive_seed(seed, "exemplar", k)
        pose = sample_pose(rng_from(rec_seed, "pose"), pose_distribution)
        label = pose_to_label(pose)
        scene = scene_from_identity(identity, seed)
        img, _ = render_scene_from_label(
            scene, label, resolution, n_samples, rng_state=derive_seed(rec_seed, "render")
        )
        styled = style_oracle(img, style_cfg)
        name = f"exemplar_{k:03d}.png"
        save_png(styled, out / name)
        records.append(
            DatasetRecord(
                file=name,
                pose=label.values,
                identity=identity,
                seed=rec_seed,
                hash=file_sha256(out / name),
            )
        )
    with open(out / "manifest.json", "w") as fh:
        fh.write(
            json.dumps(
                {"kind": "tristyle-exemplars", "seed": seed, "count": m}, sort_keys=True
            )
            + "\n"
        )
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "file": rec.file,
                        "pose": list(rec.pose),
                        "identity": rec.identity,
                        "seed": rec.seed,
                        "hash": rec.hash,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return records
