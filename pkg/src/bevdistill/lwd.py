"""Label-weight distillation on the last layer before classification.

Regions are a ``k_rho x k_theta`` tiling of the BEV lattice. A region's
sampling probability is its share of the height map, so regions with more
vertical structure are distilled more often and empty ones never.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .compress import ZCompressParams, compress_z_conv, per_voxel_z_linear
from .vpd import direction_distance
from .voxelizer import Correspondence, GridSpec, SparseVoxelGrid


class RegionSamplingError(ValueError):
    pass


@dataclass
class HeightEmbeddingParams:
    table: Tensor  # (Nz, C_V)

    @classmethod
    def init(cls, z_bins, width, rng, scale=0.1):
        return cls(Tensor(rng.normal(0.0, scale, (z_bins, width)), requires_grad=True))

    def parameters(self):
        return [self.table]


def height_embed(grid: SparseVoxelGrid, params: HeightEmbeddingParams) -> SparseVoxelGrid:
    nz, width = params.table.shape
    feats = ag.as_tensor(grid.feats)
    if nz != grid.spec.z_bins:
        raise ValueError(f"embedding has {nz} rows but the grid has {grid.spec.z_bins} z bins")
    if len(grid) and feats.shape[1] != width:
        raise ValueError(f"feature width {feats.shape[1]} != embedding width {width}")
    return grid.with_feats(feats + params.table[grid.coords[:, 2]])


@dataclass
class TwoStageParams:
    stage1: ZCompressParams  # per-voxel C_V -> C_V, z-dependent
    stage2: ZCompressParams  # column collapse C_V -> C_B

    @classmethod
    def init(cls, z_bins, c_v, c_b, rng):
        return cls(ZCompressParams.init(z_bins, c_v, c_v, rng), ZCompressParams.init(z_bins, c_v, c_b, rng))

    @classmethod
    def identity(cls, z_bins, width):
        return cls(ZCompressParams.identity(z_bins, width), ZCompressParams.identity(z_bins, width))

    def parameters(self):
        return self.stage1.parameters() + self.stage2.parameters()


def compress_two_stage(grid: SparseVoxelGrid, params: TwoStageParams) -> Tensor:
    hidden = grid.with_feats(per_voxel_z_linear(grid, params.stage1))
    return compress_z_conv(hidden, params.stage2)


# ---------------------------------------------------------------- regions


@dataclass(frozen=True)
class RegionPartition:
    spec: GridSpec
    k_rho: int = 4
    k_theta: int = 6

    def __post_init__(self):
        if not 1 <= self.k_rho <= self.spec.rho_bins or not 1 <= self.k_theta <= self.spec.theta_bins:
            raise ValueError(
                f"{self.k_rho}x{self.k_theta} regions do not fit a {self.spec.rho_bins}x{self.spec.theta_bins} lattice"
            )

    @property
    def num_regions(self):
        return self.k_rho * self.k_theta

    def pillar_region(self) -> np.ndarray:
        """Region id of every pillar, shape ``(rho_bins, theta_bins)``.

        Tiles are contiguous; when the bin count does not divide evenly,
        tile extents differ by at most one bin.
        """
        r = np.arange(self.spec.rho_bins) * self.k_rho // self.spec.rho_bins
        t = np.arange(self.spec.theta_bins) * self.k_theta // self.spec.theta_bins
        return r[:, None] * self.k_theta + t[None, :]


def region_weights(H: np.ndarray, part: RegionPartition):
    """``(W, P)`` with ``W_i = H_i / sum(H)`` and ``P_i = W_i / sum(W)``."""
    H = np.asarray(H, dtype=np.float64)
    total = H.sum()
    if total <= 0:
        raise RegionSamplingError("height map is all zero; no region can be selected")
    per_region = np.zeros(part.num_regions)
    np.add.at(per_region, part.pillar_region().reshape(-1), H.reshape(-1))
    W = per_region / total
    # one division of the region sums, so P is unchanged when H is scaled by an integer
    P = per_region / per_region.sum()
    return W, P


def sample_regions(P, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``m`` distinct regions proportionally to ``P``, renormalizing after each draw."""
    p = np.array(P, dtype=np.float64)
    if m < 1:
        raise RegionSamplingError("m must be >= 1")
    available = int((p > 0).sum())
    if available < m:
        raise RegionSamplingError(f"only {available} regions have height information, cannot draw {m}")
    chosen = []
    for _ in range(m):
        cdf = np.cumsum(p)
        u = rng.random() * cdf[-1]
        k = int(np.searchsorted(cdf, u, side="right"))
        # guard against u landing on the total through rounding, or on a zero-mass tail
        k = min(k, len(p) - 1)
        while p[k] <= 0:
            k -= 1
        chosen.append(k)
        p[k] = 0.0
    return np.array(chosen, dtype=np.int64)


def selected_columns(corr: Correspondence, part: RegionPartition, regions) -> np.ndarray:
    """Rows of the correspondence whose pillar falls in one of ``regions``."""
    region_of_pillar = part.pillar_region().reshape(-1)
    return np.flatnonzero(np.isin(region_of_pillar[corr.columns], np.asarray(regions)))


def lwd_loss(f_b, f_v_prime, rows: np.ndarray) -> Tensor:
    """Sum of per-column direction distances over the selected rows / their count."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise RegionSamplingError("no teacher columns fall in the selected regions")
    return ag.mean(direction_distance(ag.as_tensor(f_b)[rows], ag.as_tensor(f_v_prime)[rows]))
