"""Saliency head and greedy masked ROI selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from torch import nn

from .data_io import ValidationError


@dataclass
class SaliencyMap:
    values: np.ndarray  # (h_map, w_map) in [0, 1]
    source_size: tuple[int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class PatchSelection:
    """Selected regions; coords are (row, col) top-left corners in saliency-map cells."""

    coords: list[tuple[int, int]]
    crop_size_map: tuple[int, int]
    crop_size_image: tuple[int, int]
    pixel_coords: list[tuple[int, int]] = field(default_factory=list)
    patches: list[np.ndarray] = field(default_factory=list)

    def pixel_boxes(self) -> list[tuple[int, int, int, int]]:
        """(x_min, y_min, x_max, y_max) of each patch in source pixels."""
        hp, wp = self.crop_size_image
        return [(c, r, c + wp, r + hp) for r, c in self.pixel_coords]


class SaliencyHead(nn.Module):
    """Per-location linear projection to one channel; returns logits (B, h, w)."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, 1)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        return self.proj(grid).squeeze(-1)


def minmax_normalize(values):
    """Min-max normalise over the last two axes; constant maps become all zeros."""
    if isinstance(values, torch.Tensor):
        lo = values.amin(dim=(-2, -1), keepdim=True)
        hi = values.amax(dim=(-2, -1), keepdim=True)
        span = hi - lo
        safe = torch.where(span > 0, span, torch.ones_like(span))
        return torch.where(span > 0, (values - lo) / safe, torch.zeros_like(values))
    values = np.asarray(values, dtype=np.float64)
    lo = values.min(axis=(-2, -1), keepdims=True)
    span = values.max(axis=(-2, -1), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (values - lo) / safe, 0.0)


def saliency_head(grid: torch.Tensor, head: SaliencyHead, source_size: tuple[int, int]) -> list[SaliencyMap]:
    """Final global grid (B, h, w, d) -> normalised saliency maps, one per batch item."""
    with torch.no_grad():
        probs = torch.sigmoid(head(grid))
        norm = minmax_normalize(probs).cpu().numpy()
    return [SaliencyMap(m.astype(np.float64), tuple(source_size)) for m in norm]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def compute_crop_dims(h_patch, w_patch, h_map, w_map, h_image, w_image) -> tuple[int, int]:
    """Patch size expressed in saliency-map cells, rounded to nearest and at least 1."""
    if min(h_patch, w_patch, h_map, w_map, h_image, w_image) <= 0:
        raise ValidationError("crop dimension inputs must be positive")
    if h_patch > h_image or w_patch > w_image:
        raise ValidationError(f"patch {h_patch}x{w_patch} larger than image {h_image}x{w_image}")
    h_crop = max(1, _round_half_up(h_patch * h_map / h_image))
    w_crop = max(1, _round_half_up(w_patch * w_map / w_image))
    return h_crop, w_crop


def window_scores(values: np.ndarray, crop: tuple[int, int]) -> np.ndarray:
    """Average-pooled score of every stride-1 window (top-left indexed)."""
    return sliding_window_view(values, crop).mean(axis=(-2, -1))


def greedy_roi_select(saliency, n: int, crop: tuple[int, int]) -> list[tuple[int, int]]:
    """Pick n disjoint windows of highest mean saliency, one at a time.

    A window touching any previously selected cell is ineligible. Ties resolve to the
    smallest (row, col).
    """
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency, dtype=np.float64)
    hc, wc = crop
    h, w = values.shape
    if n < 1:
        raise ValidationError("n must be >= 1")
    if hc < 1 or wc < 1 or hc > h or wc > w:
        raise ValidationError(f"crop {hc}x{wc} does not fit map {h}x{w}")
    scores = window_scores(values, (hc, wc))
    masked = np.zeros((h, w), dtype=bool)
    coords: list[tuple[int, int]] = []
    for _ in range(n):
        blocked = sliding_window_view(masked, (hc, wc)).any(axis=(-2, -1))
        eligible = np.where(blocked, -np.inf, scores)
        flat = int(np.argmax(eligible))
        if not np.isfinite(eligible.flat[flat]):
            raise ValidationError(f"only {len(coords)} disjoint {hc}x{wc} windows fit, {n} requested")
        r, c = divmod(flat, eligible.shape[1])
        coords.append((r, c))
        masked[r:r + hc, c:c + wc] = True
    return coords


def map_to_image(coords, map_size, image_size, patch_size) -> list[tuple[int, int]]:
    """Scale map-cell corners to source pixels, clamping so the patch stays inside."""
    h_map, w_map = map_size
    h_img, w_img = image_size
    hp, wp = patch_size
    out = []
    for r, c in coords:
        pr = int(math.floor(r * h_img / h_map))
        pc = int(math.floor(c * w_img / w_map))
        out.append((min(max(pr, 0), h_img - hp), min(max(pc, 0), w_img - wp)))
    return out


def crop_patches(image: np.ndarray, coords, map_size, patch_size) -> list[np.ndarray]:
    h_img, w_img = image.shape[:2]
    hp, wp = patch_size
    return [image[r:r + hp, c:c + wp] for r, c in map_to_image(coords, map_size, (h_img, w_img), patch_size)]


def extract_feature_local(grid, coords, crop: tuple[int, int]):
    """Window-mean of a (h, w, d) feature grid at each selected corner.

    Works on numpy arrays or torch tensors (differentiable in the grid).
    """
    hc, wc = crop
    h, w = grid.shape[:2]
    out = []
    for r, c in coords:
        if r < 0 or c < 0 or r + hc > h or c + wc > w:
            raise ValidationError(f"window at ({r}, {c}) of size {hc}x{wc} leaves grid {h}x{w}")
        out.append(grid[r:r + hc, c:c + wc].mean(axis=(0, 1)) if isinstance(grid, np.ndarray)
                   else grid[r:r + hc, c:c + wc].mean(dim=(0, 1)))
    return out


def select_patches(saliency: SaliencyMap, image: np.ndarray, n: int, patch_size) -> PatchSelection:
    """Saliency map + source image -> full PatchSelection with crops."""
    h_img, w_img = saliency.source_size
    crop = compute_crop_dims(*patch_size, *saliency.shape, h_img, w_img)
    coords = greedy_roi_select(saliency, n, crop)
    pix = map_to_image(coords, saliency.shape, (h_img, w_img), patch_size)
    patches = [image[r:r + patch_size[0], c:c + patch_size[1]] for r, c in pix] if image is not None else []
    return PatchSelection(coords, crop, tuple(patch_size), pix, patches)
