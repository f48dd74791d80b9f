"""Train/validation splits from synthetic scenes or SemanticKITTI-style files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .models import Scene, prepare_scene
from .pointcloud import (
    DEFAULT_CLASSES,
    LabelRemap,
    compute_class_weights,
    default_scene_spec,
    read_labels,
    read_point_cloud_bin,
    remap_labels,
    synth_scene,
)

TRAIN, VAL = 0, 1


@dataclass
class Dataset:
    train: list
    val: list
    num_classes: int
    class_names: list
    ignore_id: int

    def class_weights(self) -> np.ndarray:
        return compute_class_weights([s.labels for s in self.train], self.num_classes)


def scene_seed(seed: int, split: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), split, index]).generate_state(1)[0])


def synthetic_split(cfg: TrainConfig, split: int, count: int):
    spec = default_scene_spec(cfg.data.class_counts)
    return [synth_scene(scene_seed(cfg.seed, split, k), spec) for k in range(count)]


def _load_files(entries, remap: LabelRemap, base: Path):
    out = []
    for entry in entries:
        pc = read_point_cloud_bin(base / entry["scan"])
        labels = remap_labels(read_labels(base / entry["label"], remap.ignore_id), remap)
        if len(labels) != len(pc):
            raise ValueError(f"{entry['label']}: {len(labels)} labels for {len(pc)} points")
        out.append((pc, labels))
    return out


def load_dataset(cfg: TrainConfig, base_dir=".") -> Dataset:
    base = Path(base_dir)
    if cfg.data.source == "synthetic":
        spec = default_scene_spec(cfg.data.class_counts)
        num_classes = len(spec)
        names = [c.name for c in DEFAULT_CLASSES[:num_classes]]
        ignore_id = 255
        raw_train = synthetic_split(cfg, TRAIN, cfg.data.train_scenes)
        raw_val = synthetic_split(cfg, VAL, cfg.data.val_scenes)
    else:
        remap = LabelRemap.load(base / cfg.data.remap)
        num_classes, ignore_id = remap.num_classes, remap.ignore_id
        names = remap.class_names or [f"class_{c}" for c in range(num_classes)]
        raw_train = _load_files(cfg.data.train, remap, base)
        raw_val = _load_files(cfg.data.val, remap, base)
    train = [prepare_scene(pc, ls, cfg.grid, num_classes) for pc, ls in raw_train]
    val = [prepare_scene(pc, ls, cfg.grid, num_classes) for pc, ls in raw_val]
    return Dataset(train, val, num_classes, names, ignore_id)


def scene_targets(scene: Scene) -> np.ndarray:
    """Labels of the points that fall inside the grid."""
    return scene.labels.labels[scene.in_range]
