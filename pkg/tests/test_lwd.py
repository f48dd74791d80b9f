import numpy as np
import pytest

from bevdistill import autograd as ag
from bevdistill.autograd import Tensor, finite_diff_check
from bevdistill.gradcheck import random_sparse_grid
from bevdistill.lwd import (
    HeightEmbeddingParams,
    RegionPartition,
    RegionSamplingError,
    TwoStageParams,
    compress_two_stage,
    height_embed,
    lwd_loss,
    region_weights,
    sample_regions,
    selected_columns,
)
from bevdistill.voxelizer import GridSpec, SparseVoxelGrid, match_columns

SPEC = GridSpec(0.0, 8.0, 4, 6, -2.0, 2.0, 4)


def two_stage_oracle(grid, p: TwoStageParams):
    w1, b1 = p.stage1.weight.data, p.stage1.bias.data
    w2, b2 = p.stage2.weight.data, p.stage2.bias.data
    hidden = [np.maximum(f @ w1[z] + b1, 0.0) for (_, _, z), f in zip(grid.coords, grid.feats)]
    out = {}
    for (r, t, z), h in zip(grid.coords, hidden):
        key = r * grid.spec.theta_bins + t
        out[key] = out.get(key, b2.copy()) + h @ w2[z]
    return np.maximum(np.array([out[k] for k in sorted(out)]), 0.0)


def test_zero_embedding_leaves_features(rng):
    g = random_sparse_grid(rng, SPEC, width=3)
    p = HeightEmbeddingParams(Tensor(np.zeros((4, 3))))
    assert np.array_equal(height_embed(g, p).feats.data, g.feats)


def test_embedding_gradient_counts_voxels_per_z(rng):
    g = random_sparse_grid(rng, SPEC, width=3)
    p = HeightEmbeddingParams.init(4, 3, rng)
    ag.backward(ag.tsum(height_embed(g, p).feats))
    counts = np.bincount(g.coords[:, 2], minlength=4)
    assert np.array_equal(p.table.grad, np.repeat(counts[:, None], 3, axis=1).astype(float))


def test_embedding_shape_errors(rng):
    g = random_sparse_grid(rng, SPEC, width=3)
    with pytest.raises(ValueError):
        height_embed(g, HeightEmbeddingParams.init(5, 3, rng))
    with pytest.raises(ValueError):
        height_embed(g, HeightEmbeddingParams.init(4, 2, rng))


def test_two_stage_identity_single_voxel_columns():
    coords = np.array([[0, 0, 1], [1, 2, 3], [3, 5, 0]])
    feats = np.array([[0.5, 1.0], [2.0, 0.0], [0.1, 0.3]])
    g = SparseVoxelGrid(SPEC, coords, feats, np.ones(3, dtype=np.int64))
    assert np.array_equal(compress_two_stage(g, TwoStageParams.identity(4, 2)).data, feats)


def test_two_stage_empty():
    g = SparseVoxelGrid(SPEC, np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0, dtype=np.int64))
    assert compress_two_stage(g, TwoStageParams.identity(4, 2)).shape == (0, 2)


def test_two_stage_matches_composed_oracle(rng):
    for _ in range(20):
        g = random_sparse_grid(rng, SPEC, width=3)
        p = TwoStageParams.init(4, 3, 2, rng)
        p.stage1.bias.data[...] = rng.uniform(-0.2, 0.2, 3)
        p.stage2.bias.data[...] = rng.uniform(-0.2, 0.2, 2)
        assert np.max(np.abs(compress_two_stage(g, p).data - two_stage_oracle(g, p))) < 1e-12


def test_two_stage_gradcheck(rng):
    g = random_sparse_grid(rng, SPEC, width=3)
    feats = Tensor(g.feats, requires_grad=True)
    p = TwoStageParams.init(4, 3, 2, rng)
    p.stage1.bias.data[...] = 0.3
    p.stage2.bias.data[...] = 0.3
    target = rng.normal(size=(len(g.columns()[0]), 2))
    fn = lambda: ag.mse_mean(compress_two_stage(g.with_feats(feats), p), target)  # noqa: E731
    assert finite_diff_check(fn, [feats] + p.parameters()).max_rel_error < 1e-4


def test_partition_even_tiles():
    part = RegionPartition(SPEC, 2, 3)
    regions = part.pillar_region()
    assert regions.shape == (4, 6) and regions.max() == 5
    assert np.array_equal(np.bincount(regions.ravel()), [4] * 6)


def test_partition_uneven_tiles_differ_by_one():
    part = RegionPartition(GridSpec(), 4, 6)  # 16 theta bins over 6 tiles
    sizes = np.bincount(part.pillar_region()[0])
    assert sizes.sum() == 16 and sizes.max() - sizes.min() == 1
    with pytest.raises(ValueError):
        RegionPartition(SPEC, 5, 1)


def test_region_weights_examples():
    part = RegionPartition(GridSpec(0.0, 8.0, 2, 2, -2.0, 2.0, 4), 1, 2)
    _, P = region_weights(np.ones((2, 2)), part)
    assert P.tolist() == [0.5, 0.5]
    _, P = region_weights(np.array([[0, 3], [0, 1]]), part)
    assert P.tolist() == [0.0, 1.0]
    with pytest.raises(RegionSamplingError):
        region_weights(np.zeros((2, 2)), part)


def test_region_weights_random(rng):
    part = RegionPartition(GridSpec(), 4, 6)
    for _ in range(20):
        H = rng.integers(0, 9, GridSpec().bev_shape)
        W, P = region_weights(H, part)
        assert abs(P.sum() - 1.0) < 1e-12
        sums = np.array([H[part.pillar_region() == k].sum() for k in range(24)])
        assert np.allclose(P, sums / sums.sum(), rtol=0, atol=1e-15)
        assert np.allclose(W, P, rtol=0, atol=1e-15)


def test_sampling_examples(rng):
    for _ in range(200):
        assert sample_regions([0.0, 1.0, 0.0], 1, rng).tolist() == [1]
        assert sorted(sample_regions([0.5, 0.5, 0.0], 2, rng).tolist()) == [0, 1]
    with pytest.raises(RegionSamplingError):
        sample_regions([0.5, 0.5, 0.0], 3, rng)


def test_sampling_frequencies_within_three_sigma():
    rng = np.random.default_rng(0)
    P = np.array([0.6, 0.3, 0.1])
    n = 100_000
    counts = np.bincount([sample_regions(P, 1, rng)[0] for _ in range(n)], minlength=3)
    sigma = np.sqrt(n * P * (1 - P))
    assert np.all(np.abs(counts - n * P) <= 3 * sigma)


def test_sampling_is_without_replacement(rng):
    for _ in range(100):
        picks = sample_regions(rng.random(10), 5, rng)
        assert len(set(picks.tolist())) == 5


def test_selected_columns(rng):
    g = random_sparse_grid(rng, SPEC, width=3)
    corr = match_columns(g)
    part = RegionPartition(SPEC, 2, 3)
    rows = selected_columns(corr, part, [0, 4])
    region = part.pillar_region().ravel()[corr.columns]
    assert np.array_equal(rows, np.flatnonzero((region == 0) | (region == 4)))


def test_lwd_loss_examples(rng):
    a = rng.normal(size=(5, 3))
    assert lwd_loss(a, a, np.array([0, 3])).item() == 0.0
    assert lwd_loss(np.array([[1.0, 0.0]]), np.array([[-1.0, 0.0]]), np.array([0])).item() == 4.0
    with pytest.raises(RegionSamplingError):
        lwd_loss(a, a, np.array([], dtype=np.int64))


def test_lwd_loss_cosine_identity(rng):
    a, b = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    rows = np.array([1, 2, 5, 7])
    cos = [a[r] @ b[r] / (np.linalg.norm(a[r]) * np.linalg.norm(b[r])) for r in rows]
    assert abs(lwd_loss(a, b, rows).item() - np.mean([2 - 2 * c for c in cos])) < 1e-12


def test_lwd_loss_gradient_touches_only_selected_rows(rng):
    a = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    ag.backward(lwd_loss(a, rng.normal(size=(6, 3)), np.array([1, 4])))
    assert np.flatnonzero(np.abs(a.grad).sum(axis=1)).tolist() == [1, 4]


def test_region_weights_scale_invariant(rng):
    part = RegionPartition(GridSpec(), 4, 6)
    H = rng.integers(0, 9, GridSpec().bev_shape)
    _, P = region_weights(H, part)
    for c in (2, 3, 7, 1000):
        assert np.array_equal(region_weights(H * c, part)[1], P)


def test_lwd_loss_bounds_and_rescaling(rng):
    rows = np.arange(6)
    for _ in range(50):
        a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        value = lwd_loss(a, b, rows).item()
        assert 0.0 <= value <= 4.0
        assert abs(lwd_loss(a * rng.uniform(0.1, 10, (6, 1)), b, rows).item() - value) < 1e-12


def test_height_embed_keeps_coords(rng):
    g = random_sparse_grid(rng, SPEC, width=3)
    assert np.array_equal(height_embed(g, HeightEmbeddingParams.init(4, 3, rng)).coords, g.coords)
