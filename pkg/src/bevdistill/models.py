"""Toy teacher/student networks and the distillation parameter set.

The teacher runs an MLP per nonempty voxel, the student the same kind of MLP
per occupied pillar. Each exposes its hidden feature of every layer so
distillation can hook any subset of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .compress import ZCompressParams
from .lwd import HeightEmbeddingParams, RegionPartition, TwoStageParams
from .pointcloud import LabelSet, PointCloud
from .voxelizer import (
    BevGrid,
    Correspondence,
    GridSpec,
    SparseVoxelGrid,
    height_map,
    match_columns,
    pillarize,
    voxel_labels,
    voxelize,
)
from .vpd import CrossAttentionParams, DomainTransferParams

INPUT_DIM = 5


def point_features(spec: GridSpec):
    """Encoder mapping (x, y, z, i) rows to scaled (x, y, z, i, rho)."""
    z_mid = 0.5 * (spec.z_max + spec.z_min)
    z_half = 0.5 * (spec.z_max - spec.z_min)

    def encode(points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
        rho = np.hypot(points[:, 0], points[:, 1])
        return np.stack(
            [
                points[:, 0] / spec.rho_max,
                points[:, 1] / spec.rho_max,
                (points[:, 2] - z_mid) / z_half,
                points[:, 3],
                2.0 * rho / spec.rho_max - 1.0,
            ],
            axis=1,
        )

    return encode


@dataclass
class Scene:
    """One scan with everything both networks and the distillation need."""

    cloud: PointCloud
    labels: LabelSet
    grid: SparseVoxelGrid  # feats: teacher input per voxel
    bev: BevGrid  # feats: student input per pillar
    corr: Correspondence
    pillar_rows: np.ndarray  # student row per matched column (-1: empty pillar)
    point_pillar_row: np.ndarray  # student row per point (-1: dropped)
    height: np.ndarray  # label-carrying height map

    @property
    def occupied(self):
        return self.bev.occupied

    @property
    def pillar_input(self):
        return self.bev.feats.reshape(-1, self.bev.feats.shape[-1])[self.occupied]

    @property
    def in_range(self):
        return self.grid.point_voxel >= 0


def prepare_scene(cloud: PointCloud, labels: LabelSet, spec: GridSpec, num_classes: int) -> Scene:
    enc = point_features(spec)
    grid = voxelize(cloud, spec, enc)
    bev = pillarize(cloud, spec, enc)
    corr = match_columns(grid, bev)
    occupied = bev.occupied
    row_of_pillar = np.full(spec.num_pillars, -1, dtype=np.int64)
    row_of_pillar[occupied] = np.arange(len(occupied))
    point_row = np.where(bev.point_pillar >= 0, row_of_pillar[np.maximum(bev.point_pillar, 0)], -1)
    vlab = voxel_labels(grid, labels.labels, num_classes, labels.ignore_id)
    height = height_map(grid, vlab != labels.ignore_id)
    return Scene(cloud, labels, grid, bev, corr, row_of_pillar[corr.columns], point_row, height)


class MLPNet:
    """Stack of ReLU layers plus a linear classification head."""

    def __init__(self, prefix, in_dim, width, num_layers, num_classes, rng):
        self.prefix = prefix
        self.weights, self.biases = [], []
        d = in_dim
        for _ in range(num_layers):
            self.weights.append(Tensor(rng.normal(0.0, np.sqrt(2.0 / d), (d, width)), requires_grad=True))
            self.biases.append(Tensor(np.zeros(width), requires_grad=True))
            d = width
        self.head_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / width), (width, num_classes)), requires_grad=True)
        self.head_b = Tensor(np.zeros(num_classes), requires_grad=True)

    def forward(self, x):
        """Return (per-layer features, logits)."""
        h = ag.as_tensor(x)
        feats = []
        for w, b in zip(self.weights, self.biases):
            h = ag.relu(ag.matmul(h, w) + b)
            feats.append(h)
        return feats, ag.matmul(h, self.head_w) + self.head_b

    def freeze(self):
        for _, p in self.named_parameters():
            p.requires_grad = False
        return self

    def named_parameters(self):
        out = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"{self.prefix}.layer{k + 1}.weight", w), (f"{self.prefix}.layer{k + 1}.bias", b)]
        out += [(f"{self.prefix}.head.weight", self.head_w), (f"{self.prefix}.head.bias", self.head_b)]
        return out


class ToyTeacher(MLPNet):
    def __init__(self, cfg, num_classes, rng):
        super().__init__("teacher", INPUT_DIM, cfg.c_v, cfg.num_layers, num_classes, rng)

    def run(self, scene: Scene):
        return self.forward(scene.grid.feats)

    def point_logits(self, scene: Scene, logits):
        return logits[scene.grid.point_voxel[scene.in_range]]


class ToyStudent(MLPNet):
    def __init__(self, cfg, num_classes, rng):
        super().__init__("student", INPUT_DIM, cfg.c_b, cfg.num_layers, num_classes, rng)

    def run(self, scene: Scene):
        return self.forward(scene.pillar_input)

    def point_logits(self, scene: Scene, logits):
        return logits[scene.point_pillar_row[scene.in_range]]


def matched_student_rows(feats: Tensor, scene: Scene) -> Tensor:
    """Student features at the lattice cells of the teacher columns.

    Cells without a student pillar map to an appended zero row.
    """
    rows = scene.pillar_rows
    if np.all(rows >= 0):
        return feats[rows]
    padded = ag.concat_rows([feats, Tensor(np.zeros((1, feats.shape[1])))])
    return padded[np.where(rows >= 0, rows, feats.shape[0])]


class DistillHead:
    """All learnable distillation parameters (trained with the student)."""

    def __init__(self, cfg, rng):
        nz = cfg.grid.z_bins
        self.cfg = cfg
        self.vpd = {}
        for layer in sorted(cfg.vpd_layers):
            self.vpd[layer] = {
                "compress": ZCompressParams.init(nz, cfg.c_v, cfg.c_b, rng, cfg.ablation.compression_mode),
                "transfer": DomainTransferParams.init(cfg.c_b, rng),
                "attention": CrossAttentionParams.init(cfg.c_b, rng),
            }
        self.height = HeightEmbeddingParams.init(nz, cfg.c_v, rng)
        self.two_stage = TwoStageParams.init(nz, cfg.c_v, cfg.c_b, rng)
        self.partition = RegionPartition(cfg.grid, cfg.lwd.k_rho, cfg.lwd.k_theta)

    def named_parameters(self):
        out = []
        for layer, group in self.vpd.items():
            c, t, a = group["compress"], group["transfer"], group["attention"]
            out += [(f"distill.vpd{layer}.compress.weight", c.weight), (f"distill.vpd{layer}.compress.bias", c.bias)]
            for name, p in zip(("w1", "b1", "gamma", "beta", "w2", "b2"), t.parameters()):
                out.append((f"distill.vpd{layer}.transfer.{name}", p))
            for name, p in zip(("w_q", "w_k", "w_v"), a.parameters()):
                out.append((f"distill.vpd{layer}.attention.{name}", p))
        out.append(("distill.lwd.height_embedding", self.height.table))
        for stage, params in (("stage1", self.two_stage.stage1), ("stage2", self.two_stage.stage2)):
            out += [(f"distill.lwd.{stage}.weight", params.weight), (f"distill.lwd.{stage}.bias", params.bias)]
        return out
