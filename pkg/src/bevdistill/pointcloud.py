"""SemanticKITTI-style scan/label I/O, label remapping and synthetic scenes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_IGNORE_ID = 255


class DataFormatError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 4): x, y, z, intensity

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise DataFormatError(f"points must be (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataFormatError("point coordinates must be finite")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self):
        return self.points[:, :3]


@dataclass
class LabelSet:
    labels: np.ndarray
    ignore_id: int = DEFAULT_IGNORE_ID

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.labels != self.ignore_id


@dataclass
class LabelRemap:
    mapping: dict
    num_classes: int
    ignore_id: int = DEFAULT_IGNORE_ID
    class_names: list = field(default_factory=list)

    @classmethod
    def identity(cls, num_classes: int, ignore_id: int = DEFAULT_IGNORE_ID):
        mapping = {c: c for c in range(num_classes)}
        mapping[ignore_id] = ignore_id
        return cls(mapping, num_classes, ignore_id)

    @classmethod
    def from_json(cls, doc: dict) -> "LabelRemap":
        """Parse ``{"<raw id>": train_id, ..., "num_classes": C, "ignore_id": I}``."""
        try:
            num_classes = int(doc["num_classes"])
            ignore_id = int(doc["ignore_id"])
        except KeyError as exc:
            raise DataFormatError(f"remap config missing key {exc}") from None
        mapping = {}
        for key, value in doc.items():
            if key in ("num_classes", "ignore_id", "class_names"):
                continue
            if not key.isdigit():
                raise DataFormatError(f"unknown remap key {key!r}")
            mapping[int(key)] = int(value)
        for k, v in mapping.items():
            if v != ignore_id and not 0 <= v < num_classes:
                raise DataFormatError(f"raw id {k} maps to {v}, outside 0..{num_classes - 1}")
        return cls(mapping, num_classes, ignore_id, list(doc.get("class_names", [])))

    @classmethod
    def load(cls, path) -> "LabelRemap":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict:
        doc = {str(k): v for k, v in sorted(self.mapping.items())}
        doc["num_classes"] = self.num_classes
        doc["ignore_id"] = self.ignore_id
        if self.class_names:
            doc["class_names"] = list(self.class_names)
        return doc


def semantic_kitti_remap() -> LabelRemap:
    """The 19-class SemanticKITTI mapping shipped with the package."""
    text = resources.files("bevdistill").joinpath("data/semantic_kitti.json").read_text()
    return LabelRemap.from_json(json.loads(text))


# ---------------------------------------------------------------- binary I/O


def read_point_cloud_bin(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise DataFormatError(f"{path}: {len(raw)} bytes is not a multiple of 16 (4 float32 per point)")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(pts)


def write_point_cloud_bin(path, pc: PointCloud) -> None:
    Path(path).write_bytes(pc.points.astype("<f4").tobytes())


def read_labels(path, ignore_id: int = DEFAULT_IGNORE_ID) -> LabelSet:
    """Semantic ids are the low 16 bits; the high half (instance id) is dropped."""
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise DataFormatError(f"{path}: {len(raw)} bytes is not a multiple of 4 (uint32 per point)")
    words = np.frombuffer(raw, dtype="<u4")
    return LabelSet((words & 0xFFFF).astype(np.int64), ignore_id)


def write_labels(path, labels: LabelSet, instance: np.ndarray | None = None) -> None:
    sem = labels.labels.astype(np.uint32) & 0xFFFF
    if instance is not None:
        sem = sem | (np.asarray(instance, dtype=np.uint32) << 16)
    Path(path).write_bytes(sem.astype("<u4").tobytes())


def remap_labels(raw: LabelSet, remap: LabelRemap) -> LabelSet:
    ids = raw.labels
    uniq = np.unique(ids)
    missing = [int(u) for u in uniq if int(u) not in remap.mapping]
    if missing:
        raise DataFormatError(f"raw label id {missing[0]} has no entry in the remap table")
    lut_keys = np.array(sorted(remap.mapping), dtype=np.int64)
    lut_vals = np.array([remap.mapping[k] for k in lut_keys], dtype=np.int64)
    out = lut_vals[np.searchsorted(lut_keys, ids)] if len(ids) else ids.copy()
    return LabelSet(out, remap.ignore_id)


# ---------------------------------------------------------------- class weights


def class_counts(label_sets: Iterable[LabelSet], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for ls in label_sets:
        valid = ls.labels[ls.valid]
        counts += np.bincount(valid, minlength=num_classes)[:num_classes]
    return counts


def compute_class_weights(label_sets: Iterable[LabelSet], num_classes: int) -> np.ndarray:
    """Reciprocal class frequency over a split; absent classes get weight 0."""
    counts = class_counts(label_sets, num_classes)
    total = counts.sum()
    if total == 0:
        raise DataFormatError("cannot compute class weights: every point is ignored")
    weights = np.zeros(num_classes)
    present = counts > 0
    weights[present] = total / counts[present]
    return weights


# ---------------------------------------------------------------- synthetic scenes


@dataclass(frozen=True)
class ClassSpec:
    """Points of one class fill an annulus and a height band around the sensor."""

    name: str
    count: int
    rho: tuple
    z: tuple
    intensity: tuple = (0.5, 0.1)  # mean, std; clipped to [0, 1]


# Flat classes stay within one 0.5 m z bin of the default grid, tall ones span many.
DEFAULT_CLASSES = (
    ClassSpec("road", 120, (1.0, 5.6), (-1.95, -1.55), (0.30, 0.05)),
    ClassSpec("car", 80, (5.6, 8.6), (-1.45, -0.05), (0.60, 0.05)),
    ClassSpec("pole", 60, (8.6, 10.6), (-1.90, 1.90), (0.80, 0.05)),
    ClassSpec("building", 100, (10.6, 15.5), (-0.95, 1.90), (0.45, 0.05)),
)


def default_scene_spec(counts: Sequence[int] | None = None) -> tuple:
    if counts is None:
        return DEFAULT_CLASSES
    if len(counts) > len(DEFAULT_CLASSES):
        raise ValueError(f"at most {len(DEFAULT_CLASSES)} default classes")
    return tuple(
        ClassSpec(c.name, int(n), c.rho, c.z, c.intensity) for c, n in zip(DEFAULT_CLASSES, counts)
    )


def synth_scene(seed: int, spec: Sequence[ClassSpec] = DEFAULT_CLASSES) -> tuple:
    """Deterministic labeled scene; class id is the position in ``spec``.

    Radii are drawn uniformly in area so density is even over the annulus.
    """
    rng = np.random.default_rng(seed)
    blocks, labels = [], []
    for cls_id, cs in enumerate(spec):
        n = cs.count
        if n == 0:
            continue
        r0, r1 = cs.rho
        rho = np.sqrt(rng.uniform(r0 * r0, r1 * r1, n))
        theta = rng.uniform(-math.pi, math.pi, n)
        z = rng.uniform(cs.z[0], cs.z[1], n)
        inten = np.clip(rng.normal(cs.intensity[0], cs.intensity[1], n), 0.0, 1.0)
        blocks.append(np.stack([rho * np.cos(theta), rho * np.sin(theta), z, inten], axis=1))
        labels.append(np.full(n, cls_id, dtype=np.int64))
    if not blocks:
        return PointCloud(np.zeros((0, 4))), LabelSet(np.zeros(0, dtype=np.int64))
    pts = np.concatenate(blocks)
    lab = np.concatenate(labels)
    order = rng.permutation(len(pts))
    return PointCloud(pts[order]), LabelSet(lab[order])
