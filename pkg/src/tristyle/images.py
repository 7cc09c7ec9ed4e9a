"""Image tensor conventions and lossless file I/O.

In memory an image is a torch float tensor of shape (3, H, W) with values
in [0, 1]. On disk it is an 8-bit PNG; quantization is round-to-nearest so
save/load round-trips are bit-stable.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch
from PIL import Image

__all__ = ["to_uint8", "from_uint8", "save_png", "load_png", "file_sha256", "tensor_sha256"]


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8."""
    arr = img.detach().cpu().numpy()
    arr = np.clip(arr, 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float in [0, 1]."""
    t = torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1)
    return t.to(dtype)


def save_png(img: torch.Tensor, path: str | Path) -> None:
    Image.fromarray(to_uint8(img)).save(Path(path), format="PNG")


def load_png(path: str | Path, dtype=torch.float32) -> torch.Tensor:
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr, dtype)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tensor_sha256(img: torch.Tensor) -> str:
    """Hash of the quantized image, independent of any file on disk."""
    return hashlib.sha256(to_uint8(img).tobytes()).hexdigest()
