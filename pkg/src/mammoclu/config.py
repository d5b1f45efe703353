"""Run configuration: strict YAML loading and construction of typed sections."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from .backbone import ClusterConfig, StageSpec, preset
from .data_io import PhantomConfig, ValidationError
from .fusion import ModelConfig
from .metrics import LossWeights

DEFAULTS: dict = {
    "data": {"train_manifest": None, "test_manifest": None, "image_size": [128, 128]},
    "synth": {
        "study_count": 200,
        "test_count": 50,
        "image_size": [128, 128],
        "malignant_fraction": 0.5,
        "seed": 0,
        "lesion_intensity": 0.5,
        "lesion_radius_range": [6, 12],
    },
    "backbone": {
        "global": {"preset": "small", "stages": None},
        "local": {"preset": "local", "stages": None},
        "k_neighbors": 4,
        "anchor_grid": None,
        "mlp_ratio": 4,
    },
    "roi": {"num_patches": 4, "patch_size": None},
    "fusion": {"dim": None, "overlay": "sum", "view_attention": "attention"},
    "loss": {"alpha": 1.0, "beta": 1.0, "gamma": 1.0, "delta": 0.1, "pos_weight": None,
             "threshold": 0.5, "mdr_tau": 0.25},
    "optimizer": {"learning_rate": 1e-3, "epochs": 30, "batch_size": 8, "betas": [0.9, 0.999],
                  "weight_decay": 0.0},
    "seed": 0,
    "output_dir": "runs/default",
    "precision": "float32",
}

# sections whose values are free-form (lists of dicts or None) and not merged key-by-key
_LEAF_KEYS = {"stages", "image_size", "patch_size", "anchor_grid", "lesion_radius_range", "betas"}
_STAGE_KEYS = {"width", "blocks", "reduce", "anchors"}


def merge_strict(base: dict, override: dict, path: str = "") -> dict:
    """Deep-merge override into a copy of base, rejecting keys base does not define."""
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = f"{path}{key}"
        if key not in base:
            raise ValidationError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in _LEAF_KEYS:
            if not isinstance(value, dict):
                raise ValidationError(f"config key {where!r} must be a mapping")
            out[key] = merge_strict(base[key], value, where + ".")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path = Path(".")

    def __post_init__(self):
        opt = self.raw["optimizer"]
        if int(opt["epochs"]) < 1:
            raise ValidationError("optimizer.epochs must be >= 1")
        if int(opt["batch_size"]) < 1:
            raise ValidationError("optimizer.batch_size must be >= 1")
        if not float(opt["learning_rate"]) >= 0:
            raise ValidationError("optimizer.learning_rate must be >= 0")
        if self.raw["seed"] is None:
            raise ValidationError("seed must be set")
        if self.raw["precision"] not in ("float32", "float64"):
            raise ValidationError(f"precision must be float32 or float64, got {self.raw['precision']!r}")

    @classmethod
    def from_dict(cls, user: dict | None = None, base_dir=".") -> "RunConfig":
        return cls(merge_strict(DEFAULTS, user or {}), Path(base_dir))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config not found: {path}")
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ValidationError(f"{path}: top level must be a mapping")
        return cls.from_dict(user, path.parent)

    def resolve(self, p) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def train_manifest(self) -> Path | None:
        return self.resolve(self.raw["data"]["train_manifest"])

    @property
    def test_manifest(self) -> Path | None:
        return self.resolve(self.raw["data"]["test_manifest"])

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.raw["output_dir"])

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def optimizer(self) -> dict:
        return self.raw["optimizer"]

    @property
    def loss_weights(self) -> LossWeights:
        s = self.raw["loss"]
        return LossWeights(s["alpha"], s["beta"], s["gamma"], s["delta"])

    def backbone_config(self, which: str) -> ClusterConfig:
        sect = self.raw["backbone"]
        cfg = preset(sect[which]["preset"])
        cfg.neighbors_k = int(sect["k_neighbors"])
        cfg.mlp_ratio = int(sect["mlp_ratio"])
        if sect["anchor_grid"] is not None:
            for s in cfg.stages:
                s.anchors = tuple(int(a) for a in sect["anchor_grid"])
        overrides = sect[which]["stages"]
        if overrides is not None:
            stages = []
            for i, ov in enumerate(overrides):
                unknown = set(ov) - _STAGE_KEYS
                if unknown:
                    raise ValidationError(f"unknown stage key(s) {sorted(unknown)} in backbone.{which}.stages[{i}]")
                base = vars(cfg.stages[i]).copy() if i < len(cfg.stages) else {}
                base.update(ov)
                stages.append(StageSpec(**base))
            cfg.stages = stages
        return ClusterConfig(cfg.stages, cfg.neighbors_k, cfg.mlp_ratio, cfg.in_dim)

    def model_config(self) -> ModelConfig:
        roi, fus = self.raw["roi"], self.raw["fusion"]
        return ModelConfig(
            image_size=tuple(self.raw["data"]["image_size"]),
            global_backbone=self.backbone_config("global"),
            local_backbone=self.backbone_config("local"),
            num_patches=int(roi["num_patches"]),
            patch_size=None if roi["patch_size"] is None else tuple(roi["patch_size"]),
            dim=fus["dim"],
            overlay=fus["overlay"],
            view_attention=fus["view_attention"],
        )

    def phantom_config(self, split: str = "train") -> PhantomConfig:
        s = self.raw["synth"]
        count = s["study_count"] if split == "train" else s["test_count"]
        seed = s["seed"] if split == "train" else s["seed"] + 1_000_003
        return PhantomConfig(int(count), tuple(s["image_size"]), float(s["malignant_fraction"]), int(seed),
                             float(s["lesion_intensity"]), tuple(s["lesion_radius_range"]))

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)
