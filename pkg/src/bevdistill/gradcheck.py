"""Finite-difference verification of every differentiable piece of the objective."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor, finite_diff_check
from .compress import ZCompressParams, compress_scatter_max, compress_z_conv
from .config import LwdConfig, TrainConfig
from .losses import LossWeights, logit_kd, lovasz_softmax, weighted_ce
from .lwd import HeightEmbeddingParams, TwoStageParams, compress_two_stage, height_embed, lwd_loss
from .models import prepare_scene
from .pointcloud import default_scene_spec, synth_scene
from .voxelizer import GridSpec, SparseVoxelGrid
from .vpd import (
    CrossAttentionParams,
    DomainTransferParams,
    cross_attention,
    domain_transfer,
    flatten_and_transfer,
    vpd_loss,
)

TOLERANCE = 1e-4
STEP = 1e-5
TINY_GRID = GridSpec(0.0, 16.0, 4, 4, -2.0, 2.0, 4)


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.uniform(-scale, scale, shape), requires_grad=True)


def random_sparse_grid(rng, spec=TINY_GRID, width=4, fill=0.4) -> SparseVoxelGrid:
    """Random occupancy pattern over ``spec`` with uniform [-1, 1] features."""
    occ = rng.random(spec.shape) < fill
    occ[0, 0, 0] = True
    coords = np.argwhere(occ)  # argwhere returns lexicographic order
    feats = rng.uniform(-1.0, 1.0, (len(coords), width))
    return SparseVoxelGrid(spec, coords, feats, np.ones(len(coords), dtype=np.int64))


# Each case returns (loss closure, parameters to perturb).


def case_matmul(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    return lambda: ag.tsum(ag.matmul(a, b) * ag.matmul(a, b)), [a, b]


def case_softmax_mse(rng):
    x, target = _param(rng, 4, 5), rng.uniform(0, 0.4, (4, 5))
    return lambda: ag.mse_mean(ag.softmax_rows(x), target), [x]


def case_l2_normalize(rng):
    x, target = _param(rng, 5, 7), rng.uniform(-1, 1, (5, 7))
    return lambda: ag.mse_mean(ag.l2_normalize_rows(x), target), [x]


def case_domain_transfer(rng):
    x = _param(rng, 6, 4)
    p = DomainTransferParams.init(4, rng)
    target = rng.uniform(-1, 1, (6, 4))
    return lambda: ag.mse_mean(domain_transfer(x, p), target), [x] + p.parameters()


def case_cross_attention(rng):
    f_v, f_b = _param(rng, 5, 4), _param(rng, 5, 4)
    p = CrossAttentionParams.init(4, rng)
    target = rng.uniform(-1, 1, (5, 4))
    return lambda: ag.mse_mean(cross_attention(f_v, f_b, p), target), [f_v, f_b] + p.parameters()


def case_vpd_loss(rng):
    a, b = _param(rng, 6, 4), _param(rng, 6, 4)
    return lambda: vpd_loss(a, b), [a, b]


def case_z_conv(rng):
    grid = random_sparse_grid(rng)
    feats = Tensor(grid.feats, requires_grad=True)
    p = ZCompressParams.init(TINY_GRID.z_bins, 4, 3, rng)
    p.bias.data[...] = 0.5  # keep pre-activations off the ReLU kink
    target = rng.uniform(-1, 1, (len(grid.columns()[0]), 3))
    return lambda: ag.mse_mean(compress_z_conv(grid.with_feats(feats), p), target), [feats] + p.parameters()


def case_scatter_max(rng):
    grid = random_sparse_grid(rng)
    feats = Tensor(grid.feats, requires_grad=True)
    target = rng.uniform(-1, 1, (len(grid.columns()[0]), 4))
    return lambda: ag.mse_mean(compress_scatter_max(grid.with_feats(feats)), target), [feats]


def case_vpd_path(rng):
    grid = random_sparse_grid(rng)
    comp = ZCompressParams.init(TINY_GRID.z_bins, 4, 4, rng)
    comp.bias.data[...] = 0.5
    dt = DomainTransferParams.init(4, rng)
    att = CrossAttentionParams.init(4, rng)
    n_cols = len(grid.columns()[0])
    student = _param(rng, n_cols, 4)

    def fn():
        cols = compress_z_conv(grid, comp)
        f_v, f_b = flatten_and_transfer(cols, student, dt)
        return vpd_loss(cross_attention(f_v, f_b, att), f_v)

    return fn, [student] + comp.parameters() + dt.parameters() + att.parameters()


def case_height_embedding(rng):
    grid = random_sparse_grid(rng)
    p = HeightEmbeddingParams.init(TINY_GRID.z_bins, 4, rng, scale=1.0)
    w = rng.uniform(-1, 1, (len(grid), 4))
    return lambda: ag.tsum(ag.as_tensor(height_embed(grid, p).feats) * w), p.parameters()


def case_two_stage(rng):
    grid = random_sparse_grid(rng)
    feats = Tensor(grid.feats, requires_grad=True)
    p = TwoStageParams.init(TINY_GRID.z_bins, 4, 3, rng)
    p.stage1.bias.data[...] = 0.3
    p.stage2.bias.data[...] = 0.3
    target = rng.uniform(-1, 1, (len(grid.columns()[0]), 3))
    return lambda: ag.mse_mean(compress_two_stage(grid.with_feats(feats), p), target), [feats] + p.parameters()


def case_lwd_loss(rng):
    f_b, f_v = _param(rng, 8, 4), _param(rng, 8, 4)
    rows = np.array([0, 2, 3, 6])
    return lambda: lwd_loss(f_b, f_v, rows), [f_b, f_v]


def case_weighted_ce(rng):
    logits = _param(rng, 7, 3, scale=2.0)
    targets = np.array([0, 1, 2, 1, 255, 0, 2])
    w = np.array([1.0, 3.0, 0.5])
    return lambda: weighted_ce(logits, targets, w, ignore_id=255), [logits]


def case_lovasz(rng):
    logits = _param(rng, 8, 3, scale=2.0)
    targets = np.array([0, 1, 2, 1, 0, 0, 2, 1])
    return lambda: lovasz_softmax(ag.softmax_rows(logits), targets), [logits]


def case_logit_kd(rng):
    s = _param(rng, 6, 4, scale=2.0)
    t = rng.uniform(-2, 2, (6, 4))
    return lambda: logit_kd(s, t, 2.0), [s]


def tiny_config(cfg: TrainConfig) -> TrainConfig:
    """Shrink widths and grid while keeping the run's flags and coefficients."""
    return replace(
        cfg,
        grid=TINY_GRID,
        c_v=4,
        c_b=4,
        lwd=LwdConfig(k_rho=2, k_theta=2, m=min(cfg.lwd.m, 2), enabled=cfg.lwd.enabled),
    ).validate()


def case_total(rng, cfg: TrainConfig | None = None):
    from .models import DistillHead, ToyStudent, ToyTeacher
    from .train import student_objective

    cfg = tiny_config(cfg or TrainConfig(loss_weights=LossWeights()))
    pc, labels = synth_scene(7, default_scene_spec([10, 8, 6, 8]))
    scene = prepare_scene(pc, labels, cfg.grid, 4)
    teacher = ToyTeacher(cfg, 4, rng).freeze()
    student, head = ToyStudent(cfg, 4, rng), DistillHead(cfg, rng)
    weights = np.array([1.0, 1.5, 2.0, 1.2])
    named = teacher.named_parameters() + student.named_parameters() + head.named_parameters()
    # Random positive biases keep rows away from all-zero ReLU outputs, where
    # row normalization is not differentiable.
    for name, p in named:
        if name.endswith("bias") or name.endswith(".b1") or name.endswith(".beta"):
            p.data[...] = rng.uniform(0.05, 0.3, p.shape)
    params = [p for _, p in student.named_parameters() + head.named_parameters()]

    def fn():
        # fresh generator per call so region sampling is identical under perturbation
        return student_objective(scene, teacher, student, head, cfg, weights, 255, np.random.default_rng(11)).total

    return fn, params


CASES = {
    "matmul": case_matmul,
    "softmax_rows": case_softmax_mse,
    "l2_normalize_rows": case_l2_normalize,
    "domain_transfer": case_domain_transfer,
    "cross_attention": case_cross_attention,
    "vpd_loss": case_vpd_loss,
    "vpd_path": case_vpd_path,
    "compress_z_conv": case_z_conv,
    "compress_scatter_max": case_scatter_max,
    "height_embedding": case_height_embedding,
    "two_stage_compression": case_two_stage,
    "lwd_loss": case_lwd_loss,
    "weighted_ce": case_weighted_ce,
    "lovasz_softmax": case_lovasz,
    "logit_kd": case_logit_kd,
    "total_objective": case_total,
}


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    worst_param: int
    passed: bool
    seconds: float


def run_gradcheck(cfg: TrainConfig | None = None, names=None, corrupt=(), seed: int = 0, tol: float = TOLERANCE):
    """Run the named cases (all by default); ``corrupt`` names get a wrong analytic gradient."""
    results = []
    for name in names or CASES:
        rng = np.random.default_rng([seed, sorted(CASES).index(name)])
        start = time.perf_counter()
        fn, params = CASES[name](rng, cfg) if name == "total_objective" else CASES[name](rng)
        analytic = None
        if name in corrupt:
            analytic = [g * 1.5 + 1e-3 for g in ag.grad(fn(), params)]
        report = finite_diff_check(fn, params, h=STEP, analytic=analytic)
        results.append(
            CaseResult(name, report.max_rel_error, report.worst_param, report.passed(tol), time.perf_counter() - start)
        )
    return results


def format_report(results) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<24} max_rel_err={r.max_rel_error:.3e}  ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    lines.append("all passed" if not failed else f"failed: {', '.join(failed)}")
    return "\n".join(lines)
