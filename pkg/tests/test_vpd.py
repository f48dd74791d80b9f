import math

import numpy as np
import pytest

from bevdistill import autograd as ag
from bevdistill.autograd import Tensor, finite_diff_check
from bevdistill.compress import ZCompressParams, compress_z_conv
from bevdistill.gradcheck import random_sparse_grid
from bevdistill.voxelizer import GridSpec, match_columns
from bevdistill.vpd import (
    CrossAttentionParams,
    DomainTransferParams,
    cross_attention,
    domain_transfer,
    flatten_and_transfer,
    row_cosine,
    row_standardize,
    vpd_loss,
    vpd_total,
)


def cosine_oracle(a, b):
    return float(np.mean([2.0 - 2.0 * (x @ y) / (np.linalg.norm(x) * np.linalg.norm(y)) for x, y in zip(a, b)]))


def attention_oracle(f_v, f_b, w_q, w_k, w_v):
    """Scores, row softmax and mixture with python loops."""
    q, k, v = f_v @ w_q, f_b @ w_k, f_v @ w_v
    d_k = w_q.shape[1]
    out = np.zeros_like(v)
    for i in range(len(q)):
        scores = [sum(q[i, c] * k[j, c] for c in range(d_k)) / math.sqrt(d_k) for j in range(len(k))]
        top = max(scores)
        e = [math.exp(s - top) for s in scores]
        for j in range(len(k)):
            out[i] += e[j] / sum(e) * v[j]
    return out


def test_vpd_loss_examples():
    a = np.array([[1.0, 2.0], [-3.0, 0.5]])
    assert vpd_loss(a, a).item() == 0.0
    assert vpd_loss(np.array([[1.0, -2.0]]), np.array([[-1.0, 2.0]])).item() == pytest.approx(4.0, abs=1e-15)
    assert vpd_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])).item() == 2.0


def test_vpd_loss_cosine_identity(rng):
    for _ in range(50):
        a, b = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
        assert abs(vpd_loss(a, b).item() - cosine_oracle(a, b)) < 1e-12


def test_vpd_loss_rescaling_invariance(rng):
    a, b = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    s = rng.uniform(0.01, 100.0, (6, 1))
    assert abs(vpd_loss(a * s, b).item() - vpd_loss(a, b).item()) < 1e-10


def test_vpd_loss_empty_and_mismatch():
    assert vpd_loss(np.zeros((0, 3)), np.zeros((0, 3))).item() == 0.0
    with pytest.raises(ValueError):
        vpd_loss(np.ones((2, 3)), np.ones((3, 3)))


def test_vpd_total_is_layer_mean():
    assert vpd_total([Tensor(1.0), Tensor(3.0)]).item() == 2.0
    with pytest.raises(ValueError):
        vpd_total([])


def test_vpd_loss_gradcheck(rng):
    a, b = Tensor(rng.normal(size=(6, 4)), requires_grad=True), Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    assert finite_diff_check(lambda: vpd_loss(a, b), [a, b]).max_rel_error < 1e-6


def test_attention_single_row_returns_value_row(rng):
    p = CrossAttentionParams.init(4, rng)
    f_v, f_b = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    assert np.allclose(cross_attention(f_v, f_b, p).data, f_v @ p.w_v.data, rtol=0, atol=1e-15)


def test_attention_zero_query_key_is_uniform(rng):
    p = CrossAttentionParams.init(4, rng)
    p.w_q.data[...] = 0.0
    p.w_k.data[...] = 0.0
    f_v, f_b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    out = cross_attention(f_v, f_b, p).data
    assert np.allclose(out, (f_v @ p.w_v.data).mean(axis=0), rtol=0, atol=1e-12)


def test_attention_matches_brute_force(rng):
    for n in range(1, 9):
        p = CrossAttentionParams.init(4, rng, d_k=3)
        f_v, f_b = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
        got = cross_attention(f_v, f_b, p).data
        want = attention_oracle(f_v, f_b, p.w_q.data, p.w_k.data, p.w_v.data)
        assert np.max(np.abs(got - want)) < 1e-12


def test_attention_output_in_convex_hull_of_values(rng):
    p = CrossAttentionParams.init(3, rng)
    f_v, f_b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    v = f_v @ p.w_v.data
    out = cross_attention(f_v, f_b, p).data
    assert np.all(out <= v.max(axis=0) + 1e-12) and np.all(out >= v.min(axis=0) - 1e-12)


def test_attention_empty_and_shape_errors(rng):
    p = CrossAttentionParams.init(3, rng)
    assert cross_attention(np.zeros((0, 3)), np.zeros((0, 3)), p).shape == (0, 3)
    with pytest.raises(ValueError):
        cross_attention(np.ones((2, 3)), np.ones((3, 3)), p)


def test_attention_gradcheck(rng):
    f_v, f_b = Tensor(rng.normal(size=(5, 4)), requires_grad=True), Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    p = CrossAttentionParams.init(4, rng)
    target = rng.normal(size=(5, 4))
    fn = lambda: ag.mse_mean(cross_attention(f_v, f_b, p), target)  # noqa: E731
    assert finite_diff_check(fn, [f_v, f_b] + p.parameters()).max_rel_error < 1e-4


def test_flatten_without_transfer_passes_rows_through(rng):
    cols, pillars = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    f_v, f_b = flatten_and_transfer(cols, pillars, None)
    assert np.array_equal(f_v.data, cols) and np.array_equal(f_b.data, pillars)


def test_identity_transfer_is_standardize_then_relu(rng):
    # Row normalization sits between the two linear maps, so identity
    # weights reduce the MLP to relu(row_standardize(x)), not to x.
    x = rng.normal(size=(5, 4))
    f_v, _ = flatten_and_transfer(x, np.zeros((5, 4)), DomainTransferParams.identity(4))
    assert np.allclose(f_v.data, np.maximum(row_standardize(Tensor(x)).data, 0.0), rtol=0, atol=1e-15)


def test_row_standardize_moments(rng):
    x = rng.normal(3.0, 2.0, size=(6, 8))
    y = row_standardize(Tensor(x), eps=0.0).data
    assert np.allclose(y.mean(axis=1), 0.0, atol=1e-12) and np.allclose(y.std(axis=1), 1.0, atol=1e-12)


def test_flatten_row_count_matches_columns(rng):
    spec = GridSpec(0.0, 8.0, 4, 4, -2.0, 2.0, 4)
    g = random_sparse_grid(rng, spec, width=3)
    cols = compress_z_conv(g, ZCompressParams.init(4, 3, 3, rng))
    n = len(match_columns(g))
    f_v, f_b = flatten_and_transfer(cols, rng.normal(size=(n, 3)), DomainTransferParams.init(3, rng))
    assert f_v.shape == f_b.shape == (n, 3)
    with pytest.raises(ValueError, match="row-count"):
        flatten_and_transfer(cols, rng.normal(size=(n + 1, 3)), None)


def test_domain_transfer_gradcheck(rng):
    x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    p = DomainTransferParams.init(4, rng)
    p.b1.data[...] = rng.uniform(0.05, 0.3, 4)
    target = rng.normal(size=(6, 4))
    fn = lambda: ag.mse_mean(domain_transfer(x, p), target)  # noqa: E731
    assert finite_diff_check(fn, [x] + p.parameters()).max_rel_error < 1e-4


def test_row_cosine_monitor(rng):
    a = rng.normal(size=(4, 3))
    assert row_cosine(a, 2 * a) == pytest.approx(1.0, abs=1e-12)
    assert row_cosine(a, -a) == pytest.approx(-1.0, abs=1e-12)
