"""Cylindrical voxelization, polar BEV pillarization and height maps.

Both grids share one (rho, theta) lattice. Bins are half-open ``[min, max)``
and points outside any range are dropped and counted, never clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pointcloud import PointCloud

OUTSIDE = None


@dataclass(frozen=True)
class GridSpec:
    rho_min: float = 0.0
    rho_max: float = 16.0
    rho_bins: int = 16
    theta_bins: int = 16
    z_min: float = -2.0
    z_max: float = 2.0
    z_bins: int = 8
    theta_min: float = -math.pi
    theta_max: float = math.pi

    def __post_init__(self):
        for name in ("rho_bins", "theta_bins", "z_bins"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for lo, hi in (("rho_min", "rho_max"), ("z_min", "z_max"), ("theta_min", "theta_max")):
            if not getattr(self, hi) > getattr(self, lo):
                raise ValueError(f"{hi} must exceed {lo}")

    @property
    def shape(self):
        return (self.rho_bins, self.theta_bins, self.z_bins)

    @property
    def bev_shape(self):
        return (self.rho_bins, self.theta_bins)

    @property
    def num_pillars(self):
        return self.rho_bins * self.theta_bins

    @property
    def widths(self):
        return (
            (self.rho_max - self.rho_min) / self.rho_bins,
            (self.theta_max - self.theta_min) / self.theta_bins,
            (self.z_max - self.z_min) / self.z_bins,
        )

    def to_json(self) -> dict:
        return {
            "rho_min": self.rho_min,
            "rho_max": self.rho_max,
            "rho_bins": self.rho_bins,
            "theta_bins": self.theta_bins,
            "z_min": self.z_min,
            "z_max": self.z_max,
            "z_bins": self.z_bins,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GridSpec":
        allowed = {"rho_min", "rho_max", "rho_bins", "theta_bins", "z_min", "z_max", "z_bins"}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown grid keys: {sorted(unknown)}")
        kwargs = {k: (int(v) if k.endswith("_bins") else float(v)) for k, v in doc.items()}
        return cls(**kwargs)


def _floor_index(v, lo, hi, bins):
    idx = np.floor((v - lo) / ((hi - lo) / bins)).astype(np.int64)
    inside = (v >= lo) & (v < hi)
    # Float rounding right below ``hi`` can land on ``bins``.
    idx = np.minimum(idx, bins - 1)
    return idx, inside


def bin_points(xyz: np.ndarray, spec: GridSpec):
    """Vectorized cylindrical binning: ``(indices (N, 3), inside mask (N,))``."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    rho = np.hypot(xyz[:, 0], xyz[:, 1])
    theta = np.arctan2(xyz[:, 1], xyz[:, 0])
    ri, rin = _floor_index(rho, spec.rho_min, spec.rho_max, spec.rho_bins)
    ti, tin = _floor_index(theta, spec.theta_min, spec.theta_max, spec.theta_bins)
    zi, zin = _floor_index(xyz[:, 2], spec.z_min, spec.z_max, spec.z_bins)
    return np.stack([ri, ti, zi], axis=1), rin & tin & zin


def cylindrical_bin(point, spec: GridSpec):
    """``(rho_i, theta_i, z_i)`` for one point, or ``None`` when outside the grid."""
    idx, inside = bin_points(np.asarray(point, dtype=np.float64)[:3], spec)
    if not inside[0]:
        return OUTSIDE
    return tuple(int(v) for v in idx[0])


def identity_encoder(points: np.ndarray) -> np.ndarray:
    return points


@dataclass
class SparseVoxelGrid:
    spec: GridSpec
    coords: np.ndarray  # (V, 3) int, lexicographically sorted and unique
    feats: object  # (V, C) numpy array or autograd Tensor
    point_count: np.ndarray  # (V,)
    point_voxel: np.ndarray = field(default=None)  # (N,) voxel row per input point, -1 if dropped
    dropped: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if self.point_voxel is None:
            self.point_voxel = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return self.coords.shape[0]

    @property
    def column_ids(self) -> np.ndarray:
        """Flat pillar index ``rho_i * theta_bins + theta_i`` of each voxel."""
        return self.coords[:, 0] * self.spec.theta_bins + self.coords[:, 1]

    def columns(self):
        """Sorted distinct flat pillar indices, and each voxel's position among them."""
        cols, inverse = np.unique(self.column_ids, return_inverse=True)
        return cols, inverse.reshape(-1)

    def with_feats(self, feats) -> "SparseVoxelGrid":
        return SparseVoxelGrid(
            self.spec, self.coords, feats, self.point_count, self.point_voxel, self.dropped
        )


@dataclass
class BevGrid:
    spec: GridSpec
    feats: np.ndarray  # (rho_bins, theta_bins, C)
    mask: np.ndarray  # (rho_bins, theta_bins) bool
    point_pillar: np.ndarray = field(default=None)  # (N,) flat pillar index, -1 if dropped
    dropped: int = 0

    @property
    def occupied(self) -> np.ndarray:
        """Flat indices of occupied pillars, ascending."""
        return np.flatnonzero(self.mask.reshape(-1))


def _group_mean(keys: np.ndarray, values: np.ndarray):
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(uniq), values.shape[1]))
    np.add.at(sums, inverse, values)
    return uniq, inverse, counts, sums / counts[:, None]


def voxelize(pc: PointCloud, spec: GridSpec, point_encoder=identity_encoder) -> SparseVoxelGrid:
    """Group points by cylindrical voxel; each voxel's feature is the mean encoding."""
    idx, inside = bin_points(pc.xyz, spec)
    point_voxel = np.full(len(pc), -1, dtype=np.int64)
    enc = np.asarray(point_encoder(pc.points[inside]), dtype=np.float64)
    if enc.ndim == 1:
        enc = enc.reshape(-1, 1)
    width = enc.shape[1] if enc.ndim == 2 and enc.shape[0] else np.asarray(
        point_encoder(np.zeros((1, 4)))
    ).shape[-1]
    dropped = int((~inside).sum())
    if not inside.any():
        return SparseVoxelGrid(
            spec, np.zeros((0, 3)), np.zeros((0, width)), np.zeros(0, dtype=np.int64), point_voxel, dropped
        )
    kept = idx[inside]
    keys = (kept[:, 0] * spec.theta_bins + kept[:, 1]) * spec.z_bins + kept[:, 2]
    uniq, inverse, counts, feats = _group_mean(keys, enc)
    coords = np.stack(
        [uniq // (spec.theta_bins * spec.z_bins), (uniq // spec.z_bins) % spec.theta_bins, uniq % spec.z_bins],
        axis=1,
    )
    point_voxel[inside] = inverse
    return SparseVoxelGrid(spec, coords, feats, counts.astype(np.int64), point_voxel, dropped)


def pillarize(pc: PointCloud, spec: GridSpec, pillar_encoder=identity_encoder) -> BevGrid:
    """Collapse z: each occupied pillar holds the mean encoding of its points."""
    idx, inside = bin_points(pc.xyz, spec)
    enc = np.asarray(pillar_encoder(pc.points[inside]), dtype=np.float64)
    width = enc.shape[1] if enc.ndim == 2 and enc.shape[0] else np.asarray(
        pillar_encoder(np.zeros((1, 4)))
    ).shape[-1]
    feats = np.zeros((spec.num_pillars, width))
    mask = np.zeros(spec.num_pillars, dtype=bool)
    point_pillar = np.full(len(pc), -1, dtype=np.int64)
    if inside.any():
        flat = idx[inside, 0] * spec.theta_bins + idx[inside, 1]
        uniq, _, _, means = _group_mean(flat, enc)
        feats[uniq] = means
        mask[uniq] = True
        point_pillar[inside] = flat
    return BevGrid(
        spec,
        feats.reshape(spec.rho_bins, spec.theta_bins, width),
        mask.reshape(spec.bev_shape),
        point_pillar,
        int((~inside).sum()),
    )


def height_map(grid: SparseVoxelGrid, voxel_mask: np.ndarray | None = None) -> np.ndarray:
    """Number of occupied z bins per (rho, theta) column.

    ``voxel_mask`` restricts which voxels count (e.g. only those carrying a
    non-ignored label).
    """
    spec = grid.spec
    H = np.zeros(spec.num_pillars, dtype=np.int64)
    cols = grid.column_ids
    if voxel_mask is not None:
        cols = cols[np.asarray(voxel_mask, dtype=bool)]
    np.add.at(H, cols, 1)
    return H.reshape(spec.bev_shape)


@dataclass
class Correspondence:
    columns: np.ndarray  # flat pillar index of each nonempty teacher column, ascending
    voxel_column: np.ndarray  # (V,) row in ``columns`` for each voxel

    def __len__(self):
        return len(self.columns)


def match_columns(grid: SparseVoxelGrid, bev: BevGrid | None = None) -> Correspondence:
    """Pair every nonempty teacher column with the pillar at the same lattice cell.

    The pillar index is the flat lattice index, so a column over an empty
    student pillar still matches (that pillar's feature is the zero row).
    """
    if bev is not None and bev.spec.bev_shape != grid.spec.bev_shape:
        raise ValueError(f"lattice mismatch: voxel grid {grid.spec.bev_shape} vs BEV {bev.spec.bev_shape}")
    cols, inverse = grid.columns()
    return Correspondence(cols.astype(np.int64), inverse.astype(np.int64))


def voxel_labels(grid: SparseVoxelGrid, labels: np.ndarray, num_classes: int, ignore_id: int) -> np.ndarray:
    """Majority non-ignored label per voxel (``ignore_id`` when none)."""
    out = np.full(len(grid), ignore_id, dtype=np.int64)
    if len(grid) == 0:
        return out
    labels = np.asarray(labels)
    keep = (grid.point_voxel >= 0) & (labels != ignore_id)
    votes = np.zeros((len(grid), num_classes), dtype=np.int64)
    np.add.at(votes, (grid.point_voxel[keep], labels[keep]), 1)
    has = votes.sum(axis=1) > 0
    out[has] = votes[has].argmax(axis=1)
    return out
