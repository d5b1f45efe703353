"""Image <-> (r, g, b, x, y) point-set conversion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data_io import ValidationError


@dataclass
class PointSet:
    """Row-major N x d point features laid out on an h x w grid.

    For freshly embedded images d = 5: columns 0-2 are color, 3-4 are (x, y) position.
    """

    points: np.ndarray
    grid_shape: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid_shape
        if self.points.ndim != 2 or self.points.shape[0] != h * w:
            raise ValidationError(f"PointSet holds {self.points.shape[0]} points but grid is {h}x{w}")

    @property
    def color(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def position(self) -> np.ndarray:
        return self.points[:, 3:5]


def position_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center positions in (-0.5, 0.5), symmetric about zero per axis."""
    x = (np.arange(w) + 0.5) / w - 0.5
    y = (np.arange(h) + 0.5) / h - 0.5
    yy, xx = np.meshgrid(y, x, indexing="ij")
    return xx, yy


def image_to_points(image: np.ndarray) -> PointSet:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValidationError(f"expected an h x w x 3 image, got shape {image.shape}")
    if not np.isfinite(image).all():
        raise ValidationError("image contains non-finite pixels")
    h, w, _ = image.shape
    xx, yy = position_grid(h, w)
    pts = np.concatenate([image, xx[..., None], yy[..., None]], axis=2)
    return PointSet(pts.reshape(h * w, 5), (h, w))


def points_to_grid(ps: PointSet, channels: int | None = None) -> np.ndarray:
    h, w = ps.grid_shape
    n, d = ps.points.shape
    if n != h * w:
        raise ValidationError(f"{n} points cannot fill a {h}x{w} grid")
    if channels is not None and channels != d:
        raise ValidationError(f"points carry {d} channels, {channels} requested")
    return ps.points.reshape(h, w, d)


def embed_batch(images: torch.Tensor) -> torch.Tensor:
    """Batched image_to_points for the model: B x H x W x 3 -> B x H x W x 5."""
    b, h, w, _ = images.shape
    xx, yy = position_grid(h, w)
    pos = torch.as_tensor(np.stack([xx, yy], axis=-1), dtype=images.dtype, device=images.device)
    return torch.cat([images, pos.expand(b, h, w, 2)], dim=-1)
