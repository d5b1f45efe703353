"""Global-local fusion network over four-view studies."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Backbone, ClusterConfig, preset
from .data_io import VIEWS, StudyRecord, ValidationError, load_image
from .points import embed_batch
from .roi import (SaliencyHead, SaliencyMap, compute_crop_dims, greedy_roi_select, map_to_image,
                  minmax_normalize)


@dataclass
class ViewBundle:
    study_id: str
    images: np.ndarray  # (4, H, W, 3) in VIEWS order
    label: int
    boxes: dict | None = None

    @classmethod
    def from_record(cls, rec: StudyRecord, image_size: tuple[int, int]) -> "ViewBundle":
        imgs = []
        for v in VIEWS:
            try:
                imgs.append(load_image(rec.view_paths[v], image_size))
            except OSError as exc:
                raise OSError(f"study {rec.study_id} view {v}: {exc}") from exc
        boxes = rec.boxes
        if boxes:
            boxes = _rescale_boxes(rec, boxes, image_size)
        return cls(rec.study_id, np.stack(imgs), rec.label, boxes)


def _rescale_boxes(rec, boxes, image_size):
    """Boxes are stored in source pixels; bring them to the model's image size."""
    from PIL import Image

    out = {}
    h, w = image_size
    for v, items in boxes.items():
        with Image.open(rec.view_paths[v]) as im:
            sw, sh = im.size
        sx, sy = w / sw, h / sh
        out[v] = [(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy) for b in items]
    return out


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (128, 128)
    global_backbone: ClusterConfig = field(default_factory=lambda: preset("small"))
    local_backbone: ClusterConfig = field(default_factory=lambda: preset("local"))
    num_patches: int = 4
    patch_size: tuple[int, int] | None = None
    dim: int | None = None
    overlay: str = "sum"
    view_attention: str = "attention"

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.patch_size is None:
            self.patch_size = (self.image_size[0] // 4, self.image_size[1] // 4)
        self.patch_size = tuple(int(v) for v in self.patch_size)
        if self.dim is None:
            self.dim = self.local_backbone.out_dim
        if self.overlay not in ("sum", "concat"):
            raise ValidationError(f"fusion.overlay must be 'sum' or 'concat', got {self.overlay!r}")
        if self.view_attention not in ("attention", "mean"):
            raise ValidationError(f"fusion.view_attention must be 'attention' or 'mean', got {self.view_attention!r}")
        if self.num_patches < 1:
            raise ValidationError("roi.num_patches must be >= 1")
        h, w = self.image_size
        for size, cfg, what in ((self.image_size, self.global_backbone, "image"),
                                (self.patch_size, self.local_backbone, "patch")):
            r = cfg.total_reduce
            if size[0] % r or size[1] % r:
                raise ValidationError(f"{what} size {size} not divisible by backbone reduction {r}")
        if self.patch_size[0] > h or self.patch_size[1] > w:
            raise ValidationError(f"patch {self.patch_size} larger than image {self.image_size}")

    @property
    def map_size(self) -> tuple[int, int]:
        r = self.global_backbone.total_reduce
        return self.image_size[0] // r, self.image_size[1] // r

    @property
    def crop_size(self) -> tuple[int, int]:
        return compute_crop_dims(*self.patch_size, *self.map_size, *self.image_size)


# ---------------------------------------------------------------------------
# fusion components
# ---------------------------------------------------------------------------


class AlignEmbed(nn.Module):
    """Two-layer MLP with a linear skip path mapping global width to local width."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.skip = nn.Linear(in_dim, out_dim)
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValidationError(f"align_embed expects width {self.in_dim}, got {x.shape[-1]}")
        return self.skip(x) + self.fc2(F.gelu(self.fc1(x)))

    def identity_init_(self):
        nn.init.eye_(self.skip.weight)
        for lin in (self.skip, self.fc2):
            nn.init.zeros_(lin.bias)
        nn.init.zeros_(self.fc2.weight)
        return self


def overlay(fl: torch.Tensor, pl: torch.Tensor, mode: str = "sum") -> torch.Tensor:
    if mode == "concat":
        return torch.cat([fl, pl], dim=-1)
    if fl.shape[-1] != pl.shape[-1]:
        raise ValidationError(f"overlay width mismatch: {fl.shape[-1]} vs {pl.shape[-1]}")
    return fl + pl


class AttentionPool(nn.Module):
    """Softmax over a learned linear score per row; returns (pooled, weights).

    Used for patch instances (rows = k patches) and for views (rows = 4 views).
    """

    def __init__(self, dim: int, mode: str = "attention"):
        super().__init__()
        self.mode = mode
        self.score = nn.Linear(dim, 1)

    def forward(self, rows: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if not torch.isfinite(rows).all():
            raise ValidationError("attention input contains non-finite values")
        # reductions run over sorted terms so that permuting rows is bit-exact
        if self.mode == "mean":
            weights = torch.full(rows.shape[:-1], 1.0 / rows.shape[-2], dtype=rows.dtype, device=rows.device)
        else:
            scores = self.score(rows).squeeze(-1)
            e = torch.exp(scores - scores.amax(dim=-1, keepdim=True))
            weights = e / e.sort(dim=-1).values.sum(dim=-1, keepdim=True)
        pooled = (weights.unsqueeze(-1) * rows).sort(dim=-2).values.sum(dim=-2)
        return pooled, weights


def instance_attention(rows: torch.Tensor, pool: AttentionPool):
    return pool(rows)


class FoldGlobal(nn.Module):
    """Per-channel spatial max of a (B, h, w, d) grid, then a linear alignment."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.align = nn.Linear(in_dim, out_dim)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        return self.align(grid.amax(dim=(-3, -2)))


class FuseView(nn.Module):
    """Concatenate pooled-global and attention-local vectors, project without bias."""

    def __init__(self, dim: int, out_dim: int | None = None):
        super().__init__()
        self.dim = dim
        self.proj = nn.Linear(2 * dim, out_dim or dim, bias=False)

    def forward(self, g: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        if g.shape[-1] != self.dim or a.shape[-1] != self.dim:
            raise ValidationError(f"fuse_view expects width {self.dim}, got {g.shape[-1]} and {a.shape[-1]}")
        return self.proj(torch.cat([g, a], dim=-1))


def fuse_views(views: torch.Tensor, pool: AttentionPool):
    """views: (..., 4, dim) in LCC, LMLO, RCC, RMLO order."""
    if views.shape[-2] != len(VIEWS):
        raise ValidationError(f"expected {len(VIEWS)} views, got {views.shape[-2]}")
    return pool(views)


@dataclass
class StudyOutputs:
    global_prob: torch.Tensor  # (B,)
    global_logit: torch.Tensor
    local_logit: torch.Tensor
    fusion_logit: torch.Tensor
    saliency: torch.Tensor  # (B, 4, h, w) logistic maps, pre-normalisation
    saliency_maps: np.ndarray  # (B, 4, h, w) min-max normalised, used for ROI
    coords: list  # [B][4] list of (row, col) map corners
    pixel_coords: list  # [B][4] list of (row, col) image corners
    F_fusion: torch.Tensor
    F_global: torch.Tensor
    F_local: torch.Tensor
    view_weights: dict = field(default_factory=dict)
    instance_weights: torch.Tensor | None = None  # (B, 4, k)
    global_grid: torch.Tensor | None = None  # (B, 4, h, w, d)


class MammoCluNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dg = cfg.global_backbone.out_dim
        dl = cfg.local_backbone.out_dim
        dim = cfg.dim
        inst = 2 * dim if cfg.overlay == "concat" else dim
        self.global_net = Backbone(cfg.global_backbone)
        self.local_net = Backbone(cfg.local_backbone)
        self.saliency_head = SaliencyHead(dg)
        self.pl_proj = nn.Linear(dl, dim) if dl != dim else nn.Identity()
        self.align = AlignEmbed(dg, dim)
        self.instance_pool = AttentionPool(inst)
        self.fold = FoldGlobal(dg, inst)
        self.fuse = FuseView(inst)
        self.view_fusion = AttentionPool(inst, cfg.view_attention)
        self.view_global = AttentionPool(inst, cfg.view_attention)
        self.view_local = AttentionPool(inst, cfg.view_attention)
        self.global_head = nn.Linear(inst, 1)
        self.local_head = nn.Linear(inst, 1)
        self.fusion_head = nn.Linear(inst, 1)

    def zero_init_(self):
        """Zero residual outputs and all heads: global_prob 0.5 and zero logits for any input."""
        self.global_net.zero_init_()
        self.local_net.zero_init_()
        for lin in (self.saliency_head.proj, self.global_head, self.local_head, self.fusion_head):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        return self

    def select(self, saliency: torch.Tensor):
        """Greedy ROI corners for each (B*4) map; no gradient flows through selection."""
        maps = minmax_normalize(saliency.detach()).cpu().numpy().astype(np.float64)
        crop = self.cfg.crop_size
        coords = [greedy_roi_select(m, self.cfg.num_patches, crop) for m in maps]
        return maps, coords

    def forward(self, images: torch.Tensor, coords=None) -> StudyOutputs:
        """images: (B, 4, H, W, 3). ``coords`` ([B*4] lists of map corners) freezes ROI choice."""
        cfg = self.cfg
        b, nv, h, w, _ = images.shape
        if nv != len(VIEWS):
            raise ValidationError(f"expected {len(VIEWS)} views per study, got {nv}")
        flat = images.reshape(b * nv, h, w, 3)
        g = self.global_net(embed_batch(flat)).features  # (B4, hm, wm, dg)
        sal_logits = self.saliency_head(g)
        sal = torch.sigmoid(sal_logits)
        maps, chosen = self.select(sal)
        if coords is not None:
            chosen = [list(map(tuple, c)) for c in coords]
        hc, wc = cfg.crop_size
        hp, wp = cfg.patch_size
        pix = [map_to_image(c, cfg.map_size, (h, w), cfg.patch_size) for c in chosen]

        patches = torch.stack([flat[i, r:r + hp, c:c + wp] for i, pc in enumerate(pix) for r, c in pc])
        f_pl = self.pl_proj(self.local_net(embed_batch(patches)).pooled)
        f_pl = f_pl.reshape(b * nv, cfg.num_patches, -1)
        f_fl = torch.stack([torch.stack([g[i, r:r + hc, c:c + wc].mean(dim=(0, 1)) for r, c in cc])
                            for i, cc in enumerate(chosen)])
        f_l = overlay(self.align(f_fl), f_pl, cfg.overlay)  # (B4, k, inst)
        f_a, inst_w = self.instance_pool(f_l)
        f_l_pooled = f_l.mean(dim=-2)
        f_g = self.fold(g)
        f_f = self.fuse(f_g, f_a)

        def per_study(t):
            return t.reshape(b, nv, -1)

        F_fusion, w_fusion = fuse_views(per_study(f_f), self.view_fusion)
        F_global, w_global = fuse_views(per_study(f_g), self.view_global)
        F_local, w_local = fuse_views(per_study(f_l_pooled), self.view_local)

        # saliency evidence: mean of the top window-sized logits, strongest view wins
        t = min(hc * wc, sal_logits[0].numel())
        evidence = sal_logits.reshape(b, nv, -1).topk(t, dim=-1).values.mean(dim=-1).amax(dim=-1)
        global_logit = self.global_head(F_global).squeeze(-1) + evidence
        hm, wm = cfg.map_size
        return StudyOutputs(
            global_prob=torch.sigmoid(global_logit),
            global_logit=global_logit,
            local_logit=self.local_head(F_local).squeeze(-1),
            fusion_logit=self.fusion_head(F_fusion).squeeze(-1),
            saliency=sal.reshape(b, nv, hm, wm),
            saliency_maps=maps.reshape(b, nv, hm, wm),
            coords=[chosen[i * nv:(i + 1) * nv] for i in range(b)],
            pixel_coords=[pix[i * nv:(i + 1) * nv] for i in range(b)],
            F_fusion=F_fusion, F_global=F_global, F_local=F_local,
            view_weights={"fusion": w_fusion, "global": w_global, "local": w_local},
            instance_weights=inst_w.reshape(b, nv, -1),
            global_grid=g.reshape(b, nv, *g.shape[1:]),
        )


def study_forward(bundle: ViewBundle, model: MammoCluNet, coords=None) -> StudyOutputs:
    param = next(model.parameters())
    images = torch.as_tensor(bundle.images, dtype=param.dtype, device=param.device).unsqueeze(0)
    return model(images, coords=coords)


def saliency_maps_of(out: StudyOutputs, study: int, source_size) -> list[SaliencyMap]:
    return [SaliencyMap(out.saliency_maps[study, v], tuple(source_size)) for v in range(len(VIEWS))]


def param_count(model: nn.Module) -> tuple[int, dict[str, int]]:
    """Trainable scalar count, total and per top-level submodule."""
    breakdown = {name: sum(p.numel() for p in child.parameters() if p.requires_grad)
                 for name, child in model.named_children()}
    return sum(breakdown.values()), breakdown
