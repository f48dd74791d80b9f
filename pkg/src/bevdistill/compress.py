"""Collapse sparse voxel features along z into per-column BEV features.

Two modes, matching the ablation: ``scatter_max`` (parameter free) and
``z_conv``, a learned linear map per z bin summed over the occupied voxels of
a column (a kernel spanning the whole column, applied once) followed by ReLU.
Output rows follow the ascending flat-pillar order of ``match_columns``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .voxelizer import SparseVoxelGrid

SCATTER_MAX = "scatter_max"
Z_CONV = "z_conv"
MODES = (SCATTER_MAX, Z_CONV)


@dataclass
class ZCompressParams:
    weight: Tensor  # (Nz, C_V, C_B)
    bias: Tensor  # (C_B,)
    mode: str = Z_CONV

    @classmethod
    def init(cls, z_bins, c_in, c_out, rng, mode=Z_CONV):
        scale = 1.0 / np.sqrt(c_in)
        w = rng.normal(0.0, scale, size=(z_bins, c_in, c_out))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(c_out), requires_grad=True), mode)

    @classmethod
    def identity(cls, z_bins, width, mode=Z_CONV):
        w = np.repeat(np.eye(width)[None], z_bins, axis=0)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(width), requires_grad=True), mode)

    def parameters(self):
        return [self.weight, self.bias]


def _feats(grid: SparseVoxelGrid) -> Tensor:
    return ag.as_tensor(grid.feats)


def z_conv_preactivation(grid: SparseVoxelGrid, params: ZCompressParams) -> Tensor:
    """``sum_{occupied z} feats @ W[z] + b`` per nonempty column (no ReLU)."""
    feats = _feats(grid)
    nz, c_in, c_out = params.weight.shape
    if len(grid) and feats.shape[1] != c_in:
        raise ValueError(f"feature width {feats.shape[1]} != kernel input width {c_in}")
    if nz != grid.spec.z_bins:
        raise ValueError(f"kernel has {nz} z slices but the grid has {grid.spec.z_bins}")
    cols, voxel_col = grid.columns()
    out = ag.Tensor(np.zeros((len(cols), c_out)))
    zs = grid.coords[:, 2]
    for z in range(nz):
        rows = np.flatnonzero(zs == z)
        if rows.size == 0:
            continue
        part = ag.matmul(feats[rows], params.weight[z])
        out = out + ag.scatter_rows(part, voxel_col[rows], len(cols))
    return out + params.bias


def compress_z_conv(grid: SparseVoxelGrid, params: ZCompressParams) -> Tensor:
    return ag.relu(z_conv_preactivation(grid, params))


def compress_scatter_max(grid: SparseVoxelGrid, params: ZCompressParams | None = None) -> Tensor:
    """Elementwise max over the occupied voxels of each column.

    Voxels of a column are stored in ascending z, so ties send the gradient
    to the lowest z.
    """
    feats = _feats(grid)
    if params is not None:
        _, c_in, c_out = params.weight.shape
        if c_in != c_out or (len(grid) and feats.shape[1] != c_in):
            raise ValueError("scatter_max needs equal input and output widths")
    cols, voxel_col = grid.columns()
    return ag.segment_max(feats, voxel_col, len(cols))


def compress(grid: SparseVoxelGrid, params: ZCompressParams | None, mode: str | None = None) -> Tensor:
    mode = mode or (params.mode if params is not None else SCATTER_MAX)
    if mode == Z_CONV:
        return compress_z_conv(grid, params)
    if mode == SCATTER_MAX:
        return compress_scatter_max(grid, params)
    raise ValueError(f"unknown compression mode {mode!r}; expected one of {MODES}")


def per_voxel_z_linear(grid: SparseVoxelGrid, params: ZCompressParams) -> Tensor:
    """ReLU(feats[v] @ W[z_v] + b) for every voxel, keeping the sparsity pattern."""
    feats = _feats(grid)
    nz, c_in, c_out = params.weight.shape
    if len(grid) and feats.shape[1] != c_in:
        raise ValueError(f"feature width {feats.shape[1]} != kernel input width {c_in}")
    out = ag.Tensor(np.zeros((len(grid), c_out)))
    zs = grid.coords[:, 2]
    for z in range(nz):
        rows = np.flatnonzero(zs == z)
        if rows.size == 0:
            continue
        part = ag.matmul(feats[rows], params.weight[z])
        out = out + ag.scatter_rows(part, rows, len(grid))
    return ag.relu(out + params.bias)
