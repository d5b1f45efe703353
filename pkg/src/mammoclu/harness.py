"""Training, evaluation, checkpointing and visualisation."""
from __future__ import annotations

import json
import logging
import math
import os
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw
from safetensors.torch import load_file, save_file

from .config import RunConfig
from .data_io import VIEWS, StudyRecord, ValidationError, load_manifest
from .fusion import MammoCluNet, ViewBundle, param_count
from .metrics import MetricsReport, composite_loss, metrics_report, roc_points, write_roc_csv

log = logging.getLogger(__name__)

REFERENCE_PARAM_COUNT = 9805459


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model: MammoCluNet
    config: RunConfig
    epoch: int
    history: list = field(default_factory=list)


def _dtype(cfg: RunConfig):
    return torch.float64 if cfg.raw["precision"] == "float64" else torch.float32


def build_model(cfg: RunConfig) -> MammoCluNet:
    torch.manual_seed(cfg.seed)
    return MammoCluNet(cfg.model_config()).to(_dtype(cfg))


# ---------------------------------------------------------------------------
# atomic file output
# ---------------------------------------------------------------------------


@contextmanager
def atomic_path(path: Path):
    """Yield a temp path next to ``path``; rename over it only if the block succeeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_text_atomic(path: Path, text: str):
    with atomic_path(path) as tmp:
        tmp.write_text(text)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``<path>`` (named tensors) and ``<path>.json`` (config, epoch, history)."""
    path = Path(path)
    tensors = {k: v.detach().contiguous().clone() for k, v in ckpt.model.state_dict().items()}
    with atomic_path(path) as tmp:
        save_file(tensors, str(tmp))
    meta = {"config": ckpt.config.raw, "epoch": ckpt.epoch, "history": ckpt.history}
    write_text_atomic(_sidecar(path), json.dumps(meta, indent=1, sort_keys=True))
    return path


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file() or not _sidecar(path).is_file():
        raise FileNotFoundError(f"checkpoint or sidecar missing: {path}")
    meta = json.loads(_sidecar(path).read_text())
    cfg = RunConfig.from_dict(meta["config"])
    model = build_model(cfg)
    model.load_state_dict(load_file(str(path)))
    return Checkpoint(model, cfg, meta["epoch"], meta["history"])


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def load_bundles(records: list[StudyRecord], image_size, skip_unreadable: bool = False) -> list[ViewBundle]:
    bundles = []
    for rec in records:
        try:
            bundles.append(ViewBundle.from_record(rec, image_size))
        except OSError as exc:
            if not skip_unreadable:
                raise
            log.warning("skipping study %s: %s", rec.study_id, exc)
    return bundles


def _stack(bundles, dtype):
    images = torch.as_tensor(np.stack([b.images for b in bundles]), dtype=dtype)
    labels = torch.tensor([b.label for b in bundles], dtype=dtype)
    return images, labels


@torch.no_grad()
def predict(model: MammoCluNet, bundles: list[ViewBundle], batch_size: int = 8):
    """Fusion probabilities and per-view patch boxes for each bundle, in order."""
    model.eval()
    dtype = next(model.parameters()).dtype
    scores, patch_boxes, outputs = [], [], []
    hp, wp = model.cfg.patch_size
    for i in range(0, len(bundles), batch_size):
        chunk = bundles[i:i + batch_size]
        images, _ = _stack(chunk, dtype)
        out = model(images)
        scores.extend(torch.sigmoid(out.fusion_logit).tolist())
        for study_pix in out.pixel_coords:
            patch_boxes.append([[(c, r, c + wp, r + hp) for r, c in view] for view in study_pix])
        outputs.append(out)
    return np.asarray(scores), patch_boxes, outputs


def evaluate_bundles(model, bundles, threshold=0.5, tau=0.25) -> tuple[MetricsReport, list]:
    scores, patch_boxes, _ = predict(model, bundles)
    labels = np.array([b.label for b in bundles])
    flat_patches, flat_lesions = [], []
    for b, pb in zip(bundles, patch_boxes):
        if b.boxes:
            for vi, v in enumerate(VIEWS):
                flat_patches.append(pb[vi])
                flat_lesions.append(b.boxes.get(v, []))
    has_boxes = any(b.boxes for b in bundles)
    rep = metrics_report(scores, labels, threshold,
                         flat_patches if has_boxes else None, flat_lesions if has_boxes else None, tau)
    roc = roc_points(scores, labels) if rep.auc is not None else []
    return rep, roc


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(cfg: RunConfig, max_epochs: int | None = None, save: bool = True) -> Checkpoint:
    """Seeded Adam on the composite loss; keeps the best-validation-AUC checkpoint."""
    torch.use_deterministic_algorithms(True)
    if cfg.train_manifest is None:
        raise ValidationError("data.train_manifest is required for training")
    dtype = _dtype(cfg)
    image_size = tuple(cfg.raw["data"]["image_size"])
    train_set = load_bundles(load_manifest(cfg.train_manifest), image_size)
    val_set = load_bundles(load_manifest(cfg.test_manifest), image_size) if cfg.test_manifest else None

    model = build_model(cfg)
    opt_cfg = cfg.optimizer
    opt = torch.optim.Adam(model.parameters(), lr=float(opt_cfg["learning_rate"]),
                           betas=tuple(opt_cfg["betas"]), weight_decay=float(opt_cfg["weight_decay"]))
    weights = cfg.loss_weights
    loss_cfg = cfg.raw["loss"]
    batch_size = int(opt_cfg["batch_size"])
    gen = torch.Generator().manual_seed(cfg.seed)
    epochs = int(opt_cfg["epochs"]) if max_epochs is None else max_epochs
    out_dir = cfg.output_dir
    log_path = out_dir / "train_log.jsonl"
    if save:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_text_atomic(out_dir / "config.yaml", cfg.dump())
        write_text_atomic(log_path, "")

    history, best_auc, best = [], -math.inf, None
    for epoch in range(epochs):
        t0 = time.perf_counter()
        model.train()
        order = torch.randperm(len(train_set), generator=gen).tolist()
        sums = {"total": 0.0, "global": 0.0, "local": 0.0, "fusion": 0.0, "map": 0.0}
        for i in range(0, len(order), batch_size):
            chunk = [train_set[j] for j in order[i:i + batch_size]]
            images, labels = _stack(chunk, dtype)
            out = model(images)
            loss, terms = composite_loss(out, labels, weights, loss_cfg["pos_weight"])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch} batch {[b.study_id for b in chunk]}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            n = len(chunk)
            sums["total"] += loss.item() * n
            for k, v in terms.items():
                sums[k] += v.item() * n
        record = {"epoch": epoch, "loss": {k: v / len(train_set) for k, v in sums.items()}}
        train_rep, _ = evaluate_bundles(model, train_set, loss_cfg["threshold"], loss_cfg["mdr_tau"])
        record["train"] = train_rep.to_dict()
        if val_set:
            val_rep, _ = evaluate_bundles(model, val_set, loss_cfg["threshold"], loss_cfg["mdr_tau"])
            record["val"] = val_rep.to_dict()
        else:
            val_rep = train_rep
        record["wall_time"] = time.perf_counter() - t0
        history.append(record)
        log.info(json.dumps(record, sort_keys=True))
        if save:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        score = val_rep.auc if val_rep.auc is not None else -val_rep.acc
        if best is None or score > best_auc:
            best_auc = score
            best = {k: v.detach().clone() for k, v in model.state_dict().items()}
            best_epoch = epoch
            if save:
                save_checkpoint(Checkpoint(model, cfg, epoch, history), out_dir / "best.safetensors")
    if save:
        save_checkpoint(Checkpoint(model, cfg, epochs - 1, history), out_dir / "last.safetensors")
    model.load_state_dict(best)
    return Checkpoint(model, cfg, best_epoch, history)


# ---------------------------------------------------------------------------
# evaluation / visualisation
# ---------------------------------------------------------------------------


def report_json(rep: MetricsReport) -> str:
    return json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n"


def evaluate(ckpt: Checkpoint, manifest, out_dir=None) -> MetricsReport:
    cfg = ckpt.config
    image_size = tuple(cfg.raw["data"]["image_size"])
    bundles = load_bundles(load_manifest(manifest), image_size, skip_unreadable=True)
    if not bundles:
        raise ValidationError(f"no readable studies in {manifest}")
    loss_cfg = cfg.raw["loss"]
    rep, roc = evaluate_bundles(ckpt.model, bundles, loss_cfg["threshold"], loss_cfg["mdr_tau"])
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_text_atomic(out_dir / "metrics.json", report_json(rep))
        if roc:
            with atomic_path(out_dir / "roc.csv") as tmp:
                write_roc_csv(roc, tmp)
    return rep


_PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180),
    (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195), (128, 128, 0), (255, 215, 180),
    (0, 0, 128), (128, 128, 128)], dtype=np.uint8)


@torch.no_grad()
def final_cluster_map(model: MammoCluNet, image: torch.Tensor) -> np.ndarray:
    """Cluster assignment of the last global block on the final grid, (h, w) ints."""
    from .points import embed_batch

    net = model.global_net
    x = net.standardize(embed_batch(image.unsqueeze(0)))
    for i, (reducer, norm, blocks) in enumerate(zip(net.reducers, net.norms, net.stages)):
        x = norm(reducer(x))
        for j, blk in enumerate(blocks):
            if i == len(net.stages) - 1 and j == len(blocks) - 1:
                _, assignment, _ = blk.cluster.cluster(blk.norm1(x))
                return assignment.reshape(x.shape[1:3]).cpu().numpy()
            x = blk(x)
    raise AssertionError("backbone has no blocks")


def _to_rgb(img: np.ndarray) -> Image.Image:
    return Image.fromarray(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8))


def render_cluster_map(assignment: np.ndarray, size) -> tuple[Image.Image, int]:
    used = np.unique(assignment)
    colors = _PALETTE[np.searchsorted(used, assignment) % len(_PALETTE)]
    im = Image.fromarray(colors).resize((size[1], size[0]), Image.NEAREST)
    return im, len(used)


def render_heatmap(values: np.ndarray, size) -> Image.Image:
    """Black -> red -> yellow ramp for a [0, 1] map."""
    v = np.clip(values, 0, 1)
    rgb = np.stack([np.clip(2 * v, 0, 1), np.clip(2 * v - 1, 0, 1), np.zeros_like(v)], axis=-1)
    return _to_rgb(rgb).resize((size[1], size[0]), Image.NEAREST)


def visualize(ckpt: Checkpoint, study_id: str, manifest, out_dir) -> dict:
    """Write overlay, cluster-map and saliency PNGs per view; return what was drawn."""
    records = load_manifest(manifest)
    by_id = {r.study_id: r for r in records}
    if study_id not in by_id:
        raise ValidationError(f"unknown study {study_id!r}; available: {', '.join(sorted(by_id))}")
    cfg = ckpt.config
    model = ckpt.model
    model.eval()
    image_size = tuple(cfg.raw["data"]["image_size"])
    bundle = ViewBundle.from_record(by_id[study_id], image_size)
    dtype = next(model.parameters()).dtype
    images = torch.as_tensor(bundle.images, dtype=dtype)
    with torch.no_grad():
        out = model(images.unsqueeze(0))
    hp, wp = model.cfg.patch_size
    out_dir = Path(out_dir)
    drawn = {}
    for vi, v in enumerate(VIEWS):
        im = _to_rgb(bundle.images[vi])
        draw = ImageDraw.Draw(im)
        gt = (bundle.boxes or {}).get(v, [])
        for x0, y0, x1, y1 in gt:
            draw.rectangle([x0, y0, x1 - 1, y1 - 1], outline=(0, 255, 0))
        patches = [(c, r, c + wp, r + hp) for r, c in out.pixel_coords[0][vi]]
        for x0, y0, x1, y1 in patches:
            draw.rectangle([x0, y0, x1 - 1, y1 - 1], outline=(0, 0, 255))
        assignment = final_cluster_map(model, images[vi])
        cmap, n_colors = render_cluster_map(assignment, image_size)
        heat = render_heatmap(out.saliency_maps[0, vi], image_size)
        for name, img in (("overlay", im), ("clusters", cmap), ("saliency", heat)):
            with atomic_path(out_dir / f"{study_id}_{v}_{name}.png") as tmp:
                img.save(tmp, format="PNG")
        drawn[v] = {"gt_boxes": [tuple(b) for b in gt], "patches": patches,
                    "map_coords": list(out.coords[0][vi]), "cluster_colors": n_colors,
                    "nonempty_clusters": int(len(np.unique(assignment)))}
    return drawn


def params(cfg: RunConfig) -> dict:
    total, breakdown = param_count(build_model(cfg))
    return {"total": total, "breakdown": breakdown, "reference_total": REFERENCE_PARAM_COUNT}
