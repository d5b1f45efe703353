"""Four-view study manifests, lesion boxes, image loading and synthetic phantoms."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

VIEWS = ("LCC", "LMLO", "RCC", "RMLO")
MANIFEST_HEADER = ["study_id", "lcc_path", "lmlo_path", "rcc_path", "rmlo_path", "label", "boxes_path"]
_VIEW_COLUMNS = dict(zip(VIEWS, MANIFEST_HEADER[1:5]))


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class LesionBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (0 <= self.x_min < self.x_max and 0 <= self.y_min < self.y_max):
            raise ValidationError(f"degenerate lesion box {self.as_list()}")

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def inside(self, h: int, w: int) -> bool:
        return self.x_max <= w and self.y_max <= h


@dataclass
class StudyRecord:
    study_id: str
    view_paths: dict[str, Path]
    label: int
    boxes: dict[str, list[LesionBox]] | None = None

    def __post_init__(self):
        if set(self.view_paths) != set(VIEWS):
            raise ValidationError(f"study {self.study_id}: views must be exactly {VIEWS}")
        if self.label not in (0, 1):
            raise ValidationError(f"study {self.study_id}: label must be 0 or 1, got {self.label!r}")

    @property
    def n_boxes(self) -> int:
        if not self.boxes:
            return 0
        return sum(len(b) for b in self.boxes.values())


@dataclass
class PhantomConfig:
    study_count: int = 20
    image_size: tuple[int, int] = (128, 128)
    malignant_fraction: float = 0.5
    seed: int = 0
    lesion_intensity: float = 0.5
    lesion_radius_range: tuple[int, int] = (6, 12)

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.lesion_radius_range = tuple(int(v) for v in self.lesion_radius_range)
        h, w = self.image_size
        lo, hi = self.lesion_radius_range
        if self.study_count < 1:
            raise ValidationError("study_count must be >= 1")
        if not 0.0 <= self.malignant_fraction <= 1.0:
            raise ValidationError("malignant_fraction must lie in [0, 1]")
        if not 0.0 < self.lesion_intensity <= 1.0:
            raise ValidationError("lesion_intensity must lie in (0, 1]")
        if not (1 <= lo <= hi and hi < min(h, w) / 2):
            raise ValidationError(f"lesion_radius_range {self.lesion_radius_range} invalid for image {self.image_size}")


def load_boxes(path: str | os.PathLike) -> dict[str, list[LesionBox]]:
    with open(path) as fh:
        raw = json.load(fh)
    boxes = {}
    for view, items in raw.items():
        if view not in VIEWS:
            raise ValidationError(f"{path}: unknown view {view!r}")
        boxes[view] = [LesionBox(*(int(v) for v in item)) for item in items]
    return boxes


def load_manifest(path: str | os.PathLike) -> list[StudyRecord]:
    """Read a manifest CSV; relative paths resolve against the manifest directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records: list[StudyRecord] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_HEADER[:-1] if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            sid = row["study_id"]
            if sid in seen:
                raise ValidationError(f"{path}: duplicate study_id {sid!r}")
            seen.add(sid)
            try:
                label = int(row["label"])
            except ValueError:
                raise ValidationError(f"{path}: study {sid!r} has non-integer label {row['label']!r}") from None
            views = {v: root / row[col] for v, col in _VIEW_COLUMNS.items()}
            boxes = None
            if row.get("boxes_path"):
                boxes = load_boxes(root / row["boxes_path"])
            records.append(StudyRecord(sid, views, label, boxes))
    return records


def write_manifest(records: list[StudyRecord], path: str | os.PathLike, boxes_paths: dict[str, str] | None = None):
    """Write records with view paths relative to the manifest directory."""
    path = Path(path)
    root = path.parent
    boxes_paths = boxes_paths or {}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            rel = [os.path.relpath(r.view_paths[v], root) for v in VIEWS]
            writer.writerow([r.study_id, *rel, r.label, boxes_paths.get(r.study_id, "")])


def load_image(path: str | os.PathLike, target_size: tuple[int, int]) -> np.ndarray:
    """Load a PNG as float32 h x w x 3 in [0, 1], bilinear-resized to target_size."""
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    elif arr.dtype in (np.uint16, np.int32) or np.issubdtype(arr.dtype, np.integer):
        # PIL exposes 16-bit PNGs as int32 mode "I"
        arr = arr.astype(np.float32) / 65535.0
    elif arr.dtype == bool:
        arr = arr.astype(np.float32)
    else:
        arr = arr.astype(np.float32)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    h, w = target_size
    if arr.shape[:2] != (h, w):
        arr = _resize_bilinear(arr, (h, w))
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return np.clip(arr, 0.0, 1.0)


def _resize_bilinear(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    if arr.ndim == 2:
        return np.asarray(Image.fromarray(arr).resize((w, h), Image.BILINEAR))
    planes = [np.asarray(Image.fromarray(np.ascontiguousarray(arr[..., c])).resize((w, h), Image.BILINEAR))
              for c in range(arr.shape[2])]
    return np.stack(planes, axis=2)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    img = np.full((h, w), 0.25)
    for _ in range(4):
        fy, fx = rng.uniform(0.3, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.02, 0.06) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return img


def _lesion(rng: np.random.Generator, h: int, w: int, cy: float, cx: float, radius: int, intensity: float):
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros((h, w))
    n_spots = int(rng.integers(3, 8))
    for _ in range(n_spots):
        rho = radius * 0.6 * np.sqrt(rng.uniform())
        theta = rng.uniform(0, 2 * np.pi)
        sy, sx = cy + rho * np.sin(theta), cx + rho * np.cos(theta)
        sigma = radius * rng.uniform(0.25, 0.4)
        out += np.exp(-((yy - sy) ** 2 + (xx - sx) ** 2) / (2 * sigma**2))
    disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    out = out * disk
    return intensity * out / max(out.max(), 1e-12)


def generate_phantoms(cfg: PhantomConfig, out_dir: str | os.PathLike) -> Path:
    """Write cfg.study_count synthetic four-view studies and return the manifest path.

    Malignant studies carry one lesion on a seeded side, at the same position in the
    CC and MLO views of that side; boxes are written for both views.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory not writable: {out_dir}")
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.image_size
    n_malignant = int(np.floor(cfg.malignant_fraction * cfg.study_count + 0.5))
    order = rng.permutation(cfg.study_count)
    labels = np.zeros(cfg.study_count, dtype=int)
    labels[order[:n_malignant]] = 1

    records, boxes_paths = [], {}
    for i in range(cfg.study_count):
        sid = f"S{i:04d}"
        label = int(labels[i])
        views = {v: _background(rng, h, w) for v in VIEWS}
        if label:
            lo, hi = cfg.lesion_radius_range
            radius = int(rng.integers(lo, hi + 1))
            cy = float(rng.uniform(radius, h - radius))
            cx = float(rng.uniform(radius, w - radius))
            side = ("LCC", "LMLO") if rng.uniform() < 0.5 else ("RCC", "RMLO")
            box = LesionBox(max(0, int(np.floor(cx - radius))), max(0, int(np.floor(cy - radius))),
                            min(w, int(np.ceil(cx + radius)) + 1), min(h, int(np.ceil(cy + radius)) + 1))
            assert box.inside(h, w)
            for v in side:
                views[v] = views[v] + _lesion(rng, h, w, cy, cx, radius, cfg.lesion_intensity)
            bpath = out_dir / f"{sid}_boxes.json"
            bpath.write_text(json.dumps({v: [box.as_list()] for v in side}, sort_keys=True))
            boxes_paths[sid] = bpath.name
        paths = {}
        for v in VIEWS:
            p = out_dir / f"{sid}_{v}.png"
            pix = np.clip(np.rint(np.clip(views[v], 0, 1) * 255), 0, 255).astype(np.uint8)
            Image.fromarray(pix).save(p, optimize=False)
            paths[v] = p
        records.append(StudyRecord(sid, paths, label))
    manifest = out_dir / "manifest.csv"
    write_manifest(records, manifest, boxes_paths)
    return manifest
