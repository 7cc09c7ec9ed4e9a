"""Camera parametrization, pose sampling, conditioning labels, ray generation.

Conventions (fixed once, exercised by the canonical-pose tests):
  - World frame is right-handed, y up. The scene lives inside the unit ball.
  - Cameras orbit a look-at point (default: origin) at a fixed distance,
    parametrized by (yaw, pitch, radius, fov). yaw=pitch=0 puts the camera
    on the +z axis looking toward the origin.
  - Camera frame is right-handed with the camera looking down its own -z
    axis. The extrinsic matrix is camera-to-world.
  - The pinhole intrinsic is stored normalized: focal length in units of
    image height, principal point at (0.5, 0.5). fov is the vertical field
    of view, so the matrix is resolution independent.
  - A pose conditioning label is 25 numbers: the row-major flattened 4x4
    extrinsic followed by the row-major flattened normalized 3x3 intrinsic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = [
    "CameraPose",
    "PoseLabel",
    "RayBundle",
    "PoseDistributionConfig",
    "sample_pose",
    "pose_to_label",
    "label_to_pose",
    "generate_rays",
    "rays_from_matrices",
    "frontal_pose",
    "default_near_far",
]

_WORLD_UP = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class CameraPose:
    """Orbit camera: angles in radians, radius in world units."""

    yaw: float
    pitch: float
    radius: float
    fov: float
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not 0 < self.fov < np.pi:
            raise ValueError(f"fov must be in (0, pi), got {self.fov}")
        if not abs(self.pitch) < np.pi / 2:
            raise ValueError(f"|pitch| must be < pi/2, got {self.pitch}")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        cp, sp = np.cos(self.pitch), np.sin(self.pitch)
        cy, sy = np.cos(self.yaw), np.sin(self.yaw)
        offset = np.array([sy * cp, sp, cy * cp]) * self.radius
        return np.asarray(self.look_at, dtype=np.float64) + offset

    def extrinsic(self) -> np.ndarray:
        """4x4 camera-to-world rigid transform (float64)."""
        center = self.center
        z_cam = center - np.asarray(self.look_at, dtype=np.float64)
        z_cam = z_cam / np.linalg.norm(z_cam)
        x_cam = np.cross(_WORLD_UP, z_cam)
        x_cam = x_cam / np.linalg.norm(x_cam)
        y_cam = np.cross(z_cam, x_cam)
        mat = np.eye(4, dtype=np.float64)
        mat[:3, 0] = x_cam
        mat[:3, 1] = y_cam
        mat[:3, 2] = z_cam
        mat[:3, 3] = center
        return mat

    def intrinsic(self) -> np.ndarray:
        """3x3 normalized pinhole intrinsic (focal in image-height units)."""
        f = 0.5 / np.tan(self.fov / 2.0)
        return np.array(
            [[f, 0.0, 0.5], [0.0, f, 0.5], [0.0, 0.0, 1.0]], dtype=np.float64
        )


@dataclass(frozen=True)
class PoseLabel:
    """25-number conditioning label: flat 4x4 extrinsic ++ flat 3x3 intrinsic."""

    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != 25:
            raise ValueError(f"pose label needs 25 values, got {len(self.values)}")

    def extrinsic(self) -> np.ndarray:
        return np.asarray(self.values[:16], dtype=np.float64).reshape(4, 4)

    def intrinsic(self) -> np.ndarray:
        return np.asarray(self.values[16:], dtype=np.float64).reshape(3, 3)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass
class RayBundle:
    """Per-pixel rays: origins/directions are (H, W, 3), directions unit length."""

    origins: np.ndarray
    directions: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if not (self.near > 0 and self.far > 0 and self.near < self.far):
            raise ValueError(f"need 0 < near < far, got ({self.near}, {self.far})")

    @property
    def shape(self) -> tuple[int, int]:
        return self.origins.shape[0], self.origins.shape[1]


@dataclass(frozen=True)
class PoseDistributionConfig:
    """Uniform orbit-pose distribution; point ranges are allowed."""

    yaw_range: tuple[float, float] = (-0.4, 0.4)
    pitch_range: tuple[float, float] = (-0.2, 0.2)
    radius: float = 2.7
    fov: float = 0.8
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self) -> None:
        ylo, yhi = self.yaw_range
        plo, phi = self.pitch_range
        if ylo > yhi or plo > phi:
            raise ConfigError("pose distribution ranges must satisfy lo <= hi")
        if max(abs(plo), abs(phi)) >= np.pi / 2:
            raise ConfigError("pitch range must stay within (-pi/2, pi/2)")
        if self.radius <= 0:
            raise ConfigError("radius must be positive")
        if not 0 < self.fov < np.pi:
            raise ConfigError("fov must be in (0, pi)")


def frontal_pose(dist: PoseDistributionConfig) -> CameraPose:
    """Canonical frontal camera for a given distribution (yaw = pitch = 0)."""
    return CameraPose(0.0, 0.0, dist.radius, dist.fov, dist.look_at)


def sample_pose(rng: np.random.Generator, dist: PoseDistributionConfig) -> CameraPose:
    """Draw one pose uniformly from the configured yaw/pitch ranges."""
    dist.validate()
    yaw = float(rng.uniform(dist.yaw_range[0], dist.yaw_range[1]))
    pitch = float(rng.uniform(dist.pitch_range[0], dist.pitch_range[1]))
    if dist.yaw_range[0] == dist.yaw_range[1]:
        yaw = dist.yaw_range[0]
    if dist.pitch_range[0] == dist.pitch_range[1]:
        pitch = dist.pitch_range[0]
    return CameraPose(yaw, pitch, dist.radius, dist.fov, dist.look_at)


def pose_to_label(pose: CameraPose) -> PoseLabel:
    values = np.concatenate(
        [pose.extrinsic().reshape(-1), pose.intrinsic().reshape(-1)]
    )
    return PoseLabel(tuple(float(v) for v in values))


def label_to_pose(label: PoseLabel) -> CameraPose:
    """Recover the orbit parametrization from a label of a look-at-origin pose."""
    ext = label.extrinsic()
    center = ext[:3, 3]
    radius = float(np.linalg.norm(center))
    if radius <= 0:
        raise ValueError("label encodes a camera at the origin")
    pitch = float(np.arcsin(np.clip(center[1] / radius, -1.0, 1.0)))
    yaw = float(np.arctan2(center[0], center[2]))
    f = label.intrinsic()[0, 0]
    fov = float(2.0 * np.arctan(0.5 / f))
    return CameraPose(yaw, pitch, radius, fov)


def default_near_far(radius: float, margin: float = 1.0) -> tuple[float, float]:
    """Integration interval bracketing the unit-ball scene around the origin."""
    return radius - margin, radius + margin


def rays_from_matrices(
    extrinsic: np.ndarray,
    intrinsic: np.ndarray,
    resolution: tuple[int, int],
    near: float,
    far: float,
) -> RayBundle:
    """Pinhole rays through pixel centers, in world coordinates.

    `extrinsic` is camera-to-world (4x4) and `intrinsic` the normalized 3x3;
    focal/principal point are scaled by the image size internally.
    """
    h, w = resolution
    if h < 1 or w < 1:
        raise ValueError(f"resolution must be >= 1x1, got {resolution}")
    if not near < far:
        raise ValueError(f"need near < far, got ({near}, {far})")
    f_pix = intrinsic[0, 0] * h
    cx = intrinsic[0, 2] * w
    cy = intrinsic[1, 2] * h
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    dx = (jj + 0.5 - cx) / f_pix
    dy = -(ii + 0.5 - cy) / f_pix
    dirs_cam = np.stack([dx, dy, -np.ones_like(dx)], axis=-1)
    rot = extrinsic[:3, :3]
    dirs = dirs_cam @ rot.T
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(extrinsic[:3, 3], dirs.shape).copy()
    return RayBundle(origins=origins, directions=dirs, near=float(near), far=float(far))


def generate_rays(
    pose: CameraPose,
    resolution: tuple[int, int],
    near: float | None = None,
    far: float | None = None,
) -> RayBundle:
    """Rays for every pixel of a pinhole camera at `pose`."""
    if near is None or far is None:
        d_near, d_far = default_near_far(pose.radius)
        near = d_near if near is None else near
        far = d_far if far is None else far
    return rays_from_matrices(pose.extrinsic(), pose.intrinsic(), resolution, near, far)
