"""BEV map exports: height map and per-pillar error counts, as CSV and 8-bit PGM."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .models import Scene
from .voxelizer import height_map


def write_map_csv(path, grid: np.ndarray) -> None:
    """One CSV row per rho bin, one column per theta bin."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(grid):
            w.writerow([int(v) for v in row])


def read_map_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[int(v) for v in row] for row in csv.reader(fh)], dtype=np.int64)


def to_pgm_bytes(grid: np.ndarray) -> bytes:
    """Binary PGM (P5), values scaled so the map maximum becomes 255."""
    grid = np.asarray(grid, dtype=np.float64)
    peak = grid.max() if grid.size else 0.0
    scaled = np.zeros(grid.shape, dtype=np.uint8) if peak <= 0 else np.round(grid * (255.0 / peak)).astype(np.uint8)
    rows, cols = grid.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + scaled.tobytes()


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


def error_count_map(scene: Scene, predictions: np.ndarray) -> np.ndarray:
    """Misclassified (non-ignored, in-range) points per pillar."""
    spec = scene.grid.spec
    counts = np.zeros(spec.num_pillars, dtype=np.int64)
    targets = scene.labels.labels[scene.in_range]
    pillars = scene.bev.point_pillar[scene.in_range]
    wrong = (targets != scene.labels.ignore_id) & (np.asarray(predictions) != targets)
    np.add.at(counts, pillars[wrong], 1)
    return counts.reshape(spec.bev_shape)


def export_maps(scene: Scene, out_dir, predictions=None, prefix="scan") -> list:
    """Write ``<prefix>_height.{csv,pgm}`` and, with predictions, ``<prefix>_errors.{csv,pgm}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = {"height": height_map(scene.grid)}
    if predictions is not None:
        maps["errors"] = error_count_map(scene, predictions)
    written = []
    for name, grid in maps.items():
        csv_path, pgm_path = out / f"{prefix}_{name}.csv", out / f"{prefix}_{name}.pgm"
        write_map_csv(csv_path, grid)
        pgm_path.write_bytes(to_pgm_bytes(grid))
        written += [csv_path, pgm_path]
    return written
