"""Context-clustering feature extractor.

Points live on a channels-last grid ``(B, H, W, d)``. Each stage starts with a
point reducer (concatenate r x r neighbourhoods, project linearly) followed by
context-cluster blocks. A block picks a uniform lattice of anchors, averages each
anchor with its k grid neighbours, assigns every point to its most cosine-similar
anchor and exchanges similarity-gated aggregated values inside each cluster.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data_io import ValidationError
from .points import PointSet, embed_batch

EPS = 1e-12
# fixed standardisation of the colour channels before the stem
COLOR_MEAN = 0.5
COLOR_STD = 0.25


@dataclass
class StageSpec:
    width: int
    blocks: int = 1
    reduce: int = 2
    anchors: tuple[int, int] = (2, 2)

    def __post_init__(self):
        self.anchors = tuple(int(a) for a in self.anchors)
        if self.width < 1 or self.blocks < 1:
            raise ValidationError(f"stage width and blocks must be >= 1, got {self.width}, {self.blocks}")
        if self.reduce not in (1, 2, 4):
            raise ValidationError(f"stage reduce must be 1, 2 or 4, got {self.reduce}")
        if self.anchors[0] * self.anchors[1] < 1:
            raise ValidationError("anchor grid must hold at least one anchor")


@dataclass
class ClusterConfig:
    stages: list[StageSpec]
    neighbors_k: int = 4
    mlp_ratio: int = 4
    in_dim: int = 5

    def __post_init__(self):
        if self.neighbors_k not in (4, 8):
            raise ValidationError(f"neighbors_k must be 4 or 8, got {self.neighbors_k}")
        if not self.stages:
            raise ValidationError("a backbone needs at least one stage")
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]

    @property
    def total_reduce(self) -> int:
        return int(np.prod([s.reduce for s in self.stages]))

    @property
    def out_dim(self) -> int:
        return self.stages[-1].width


def _stages(widths, blocks, reduces, anchors):
    return [StageSpec(w, b, r, a) for w, b, r, a in zip(widths, blocks, reduces, anchors)]


PRESETS: dict[str, ClusterConfig] = {
    "tiny": ClusterConfig(_stages([16, 32], [1, 1], [4, 2], [(2, 2), (2, 2)])),
    "small": ClusterConfig(_stages([32, 64, 128, 256], [1, 1, 2, 1], [4, 2, 2, 1],
                                   [(4, 4), (4, 4), (4, 4), (2, 2)])),
    "local": ClusterConfig(_stages([32, 64, 128], [1, 1, 1], [4, 2, 2], [(2, 2), (2, 2), (2, 2)])),
    # Informational only: sized so the whole pipeline lands near 9.8M parameters.
    "paper-scale": ClusterConfig(_stages([64, 128, 320, 512], [2, 2, 4, 2], [4, 2, 2, 2],
                                         [(4, 4), (4, 4), (2, 2), (2, 2)])),
    "paper-scale-local": ClusterConfig(_stages([64, 128, 256], [2, 2, 2], [4, 2, 2], [(2, 2), (2, 2), (2, 2)])),
}


def preset(name: str) -> ClusterConfig:
    if name not in PRESETS:
        raise ValidationError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


# ---------------------------------------------------------------------------
# clustering primitives
# ---------------------------------------------------------------------------


def select_anchors(grid_shape: tuple[int, int], anchor_grid: tuple[int, int]) -> np.ndarray:
    """Row-major flat indices of a uniform n_h x n_w anchor lattice.

    Anchor (i, j) sits at row floor((i + 0.5) * h / n_h), col floor((j + 0.5) * w / n_w).
    """
    h, w = grid_shape
    nh, nw = anchor_grid
    if nh < 1 or nw < 1 or nh > h or nw > w:
        raise ValidationError(f"anchor grid {nh}x{nw} does not fit point grid {h}x{w}")
    rows = np.floor((np.arange(nh) + 0.5) * h / nh).astype(np.int64)
    cols = np.floor((np.arange(nw) + 0.5) * w / nw).astype(np.int64)
    return (rows[:, None] * w + cols[None, :]).reshape(-1)


_OFFSETS = {
    4: [(-1, 0), (1, 0), (0, -1), (0, 1)],
    8: [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)],
}


def neighbor_indices(grid_shape: tuple[int, int], anchor_idx: np.ndarray, k: int) -> np.ndarray:
    """(M, k) flat indices of each anchor's grid neighbours, edge-replicated at borders."""
    if k not in _OFFSETS:
        raise ValidationError(f"k must be 4 or 8, got {k}")
    h, w = grid_shape
    r, c = np.divmod(np.asarray(anchor_idx), w)
    offs = np.array(_OFFSETS[k])
    nr = np.clip(r[:, None] + offs[None, :, 0], 0, h - 1)
    nc = np.clip(c[:, None] + offs[None, :, 1], 0, w - 1)
    return nr * w + nc


def anchor_feature(anchor: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
    """(anchor + sum of k neighbours) / (k + 1), per dimension."""
    anchor = torch.as_tensor(anchor)
    neighbors = torch.as_tensor(neighbors)
    if neighbors.shape[-1] != anchor.shape[-1]:
        raise ValidationError(f"anchor has {anchor.shape[-1]} dims, neighbours {neighbors.shape[-1]}")
    k = neighbors.shape[-2]
    return (anchor + neighbors.sum(dim=-2)) / (k + 1)


def anchor_features(points: torch.Tensor, grid_shape, anchor_grid, k: int) -> torch.Tensor:
    """Neighbourhood-averaged anchor features for (B, N, d) points; reads pre-update values."""
    idx = select_anchors(grid_shape, anchor_grid)
    nbr = torch.as_tensor(neighbor_indices(grid_shape, idx, k), device=points.device)
    idx = torch.as_tensor(idx, device=points.device)
    return anchor_feature(points[:, idx], points[:, nbr])


def cosine_similarity(points: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """(..., N, d) x (..., M, d) -> (..., N, M) with EPS added to each norm."""
    pn = points / (points.norm(dim=-1, keepdim=True) + EPS)
    an = anchors / (anchors.norm(dim=-1, keepdim=True) + EPS)
    return pn @ an.transpose(-1, -2)


def assign_clusters(points, anchors) -> tuple[torch.Tensor, torch.Tensor]:
    """Assign each point to the anchor of highest cosine similarity.

    Returns ``(assignment, similarity)``; ties go to the lowest anchor index.
    """
    points = torch.as_tensor(points)
    anchors = torch.as_tensor(anchors)
    if anchors.shape[-2] == 0:
        raise ValidationError("cannot assign clusters without anchors")
    sim = cosine_similarity(points, anchors)
    # torch.argmax returns the first maximal index
    return sim.argmax(dim=-1), sim


def aggregate_dispatch(values: torch.Tensor, assignment: torch.Tensor, gate: torch.Tensor,
                       anchor_values: torch.Tensor) -> torch.Tensor:
    """Similarity-gated cluster aggregation and dispatch.

    values: (B, N, dv); assignment: (B, N); gate: (B, N) member weights s_j in (0, 1);
    anchor_values: (B, M, dv). Cluster centre g_c = (v_c + sum s_j v_j) / (1 + sum s_j);
    member j receives s_j * g_c. Empty clusters dispatch nothing.
    """
    m = anchor_values.shape[-2]
    onehot = F.one_hot(assignment, m).to(values.dtype)
    weights = onehot * gate.unsqueeze(-1)
    num = anchor_values + weights.transpose(-1, -2) @ values
    den = 1.0 + weights.sum(dim=-2).unsqueeze(-1)
    centres = num / den
    return weights @ centres


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class ClusterOp(nn.Module):
    def __init__(self, dim: int, anchors: tuple[int, int], k: int = 4):
        super().__init__()
        self.anchors = tuple(anchors)
        self.k = k
        self.sim_proj = nn.Linear(dim, dim)
        self.value_proj = nn.Linear(dim, dim)
        self.sim_alpha = nn.Parameter(torch.ones(()))
        self.sim_beta = nn.Parameter(torch.zeros(()))
        self.out_proj = nn.Linear(dim, dim)

    def lattice(self, grid_shape):
        h, w = grid_shape
        return min(self.anchors[0], h), min(self.anchors[1], w)

    def cluster(self, x: torch.Tensor):
        """Assignment and similarity-to-own-anchor for (B, H, W, d) input (no residual)."""
        b, h, w, d = x.shape
        feats = self.sim_proj(x).reshape(b, h * w, d)
        centres = anchor_features(feats, (h, w), self.lattice((h, w)), self.k)
        assignment, sim = assign_clusters(feats, centres)
        return feats, assignment, sim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, d = x.shape
        _, assignment, sim = self.cluster(x)
        own = sim.gather(-1, assignment.unsqueeze(-1)).squeeze(-1)
        gate = torch.sigmoid(self.sim_alpha * own + self.sim_beta)
        values = self.value_proj(x).reshape(b, h * w, d)
        anchor_vals = anchor_features(values, (h, w), self.lattice((h, w)), self.k)
        out = aggregate_dispatch(values, assignment, gate, anchor_vals)
        return self.out_proj(out).reshape(b, h, w, d)


class ContextClusterBlock(nn.Module):
    """norm -> cluster op -> residual; norm -> two-layer MLP -> residual."""

    def __init__(self, dim: int, anchors: tuple[int, int], k: int = 4, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.cluster = ClusterOp(dim, anchors, k)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.cluster(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))

    def zero_init_(self):
        for lin in (self.cluster.out_proj, self.fc2):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)


class PointReducer(nn.Module):
    """Concatenate each non-overlapping r x r neighbourhood and project to out_dim."""

    def __init__(self, in_dim: int, out_dim: int, reduce: int):
        super().__init__()
        self.reduce = reduce
        self.proj = nn.Linear(in_dim * reduce * reduce, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, d = x.shape
        r = self.reduce
        if h % r or w % r:
            raise ValidationError(f"grid {h}x{w} is not divisible by reduce factor {r}")
        x = x.reshape(b, h // r, r, w // r, r, d).permute(0, 1, 3, 2, 4, 5)
        return self.proj(x.reshape(b, h // r, w // r, r * r * d))


@dataclass
class BackboneOutput:
    features: torch.Tensor  # (B, h, w, d) final-stage grid
    stage_features: list[torch.Tensor] = field(default_factory=list)
    pooled: torch.Tensor | None = None  # (B, d)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.features.shape[1:3])


class Backbone(nn.Module):
    def __init__(self, cfg: ClusterConfig):
        super().__init__()
        self.cfg = cfg
        self.reducers = nn.ModuleList()
        self.norms = nn.ModuleList()
        self.stages = nn.ModuleList()
        in_dim = cfg.in_dim
        for spec in cfg.stages:
            self.reducers.append(PointReducer(in_dim, spec.width, spec.reduce))
            self.norms.append(nn.LayerNorm(spec.width))
            self.stages.append(nn.Sequential(*[
                ContextClusterBlock(spec.width, spec.anchors, cfg.neighbors_k, cfg.mlp_ratio)
                for _ in range(spec.blocks)]))
            in_dim = spec.width

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def forward(self, points: torch.Tensor) -> BackboneOutput:
        """points: (B, H, W, in_dim) embedded point grid."""
        _, h, w, _ = points.shape
        r = self.cfg.total_reduce
        if h % r or w % r:
            raise ValidationError(f"input grid {h}x{w} is not divisible by the total reduction {r}")
        x = self.standardize(points)
        stage_features = []
        for reducer, norm, blocks in zip(self.reducers, self.norms, self.stages):
            x = blocks(norm(reducer(x)))
            stage_features.append(x)
        return BackboneOutput(x, stage_features, x.mean(dim=(1, 2)))

    def standardize(self, points: torch.Tensor) -> torch.Tensor:
        if self.cfg.in_dim != 5:
            return points
        return torch.cat([(points[..., :3] - COLOR_MEAN) / COLOR_STD, points[..., 3:]], dim=-1)

    def forward_images(self, images: torch.Tensor) -> BackboneOutput:
        return self.forward(embed_batch(images))

    def zero_init_(self):
        for m in self.modules():
            if isinstance(m, ContextClusterBlock):
                m.zero_init_()
        return self


def backbone_forward(ps: PointSet, model: Backbone) -> BackboneOutput:
    """Run one point set through ``model``; the result keeps a batch axis of 1."""
    h, w = ps.grid_shape
    param = next(model.parameters())
    grid = torch.as_tensor(ps.points, dtype=param.dtype, device=param.device).reshape(1, h, w, -1)
    return model(grid)
