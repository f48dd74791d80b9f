"""Voxel-to-pillar distillation for middle layers.

Teacher columns (already compressed along z) pass through a small domain
transfer MLP; a cross-attention block takes its query and value from the
teacher rows and its key from the matched student pillars; the loss compares
row directions of the attended output against the teacher rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

ROW_NORM_EPS = 1e-5


@dataclass
class DomainTransferParams:
    """Linear -> row standardization with affine -> ReLU -> Linear."""

    w1: Tensor
    b1: Tensor
    gamma: Tensor
    beta: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, width, rng):
        scale = 1.0 / np.sqrt(width)
        return cls(
            Tensor(rng.normal(0.0, scale, (width, width)), requires_grad=True),
            Tensor(np.zeros(width), requires_grad=True),
            Tensor(np.ones(width), requires_grad=True),
            Tensor(np.zeros(width), requires_grad=True),
            # final affine starts as pass-through
            Tensor(np.eye(width), requires_grad=True),
            Tensor(np.zeros(width), requires_grad=True),
        )

    @classmethod
    def identity(cls, width):
        p = cls.init(width, np.random.default_rng(0))
        p.w1.data[...] = np.eye(width)
        return p

    def parameters(self):
        return [self.w1, self.b1, self.gamma, self.beta, self.w2, self.b2]


def row_standardize(x: Tensor, eps: float = ROW_NORM_EPS) -> Tensor:
    """Subtract the row mean and divide by the row standard deviation."""
    centered = x - ag.mean(x, axis=1, keepdims=True)
    var = ag.mean(centered * centered, axis=1, keepdims=True)
    return centered / ag.sqrt(var + eps)


def domain_transfer(x: Tensor, p: DomainTransferParams) -> Tensor:
    h = ag.matmul(x, p.w1) + p.b1
    h = row_standardize(h) * p.gamma + p.beta
    return ag.matmul(ag.relu(h), p.w2) + p.b2


def flatten_and_transfer(teacher_cols, student_rows, params: DomainTransferParams | None):
    """Return ``(f_V, f_B)``, both ``N_i x C_B``.

    ``teacher_cols`` is the z-compressed teacher feature per matched column
    and ``student_rows`` the student pillar feature at the same lattice cells.
    ``params=None`` skips the domain transfer.
    """
    teacher_cols, student_rows = ag.as_tensor(teacher_cols), ag.as_tensor(student_rows)
    if teacher_cols.shape[0] != student_rows.shape[0]:
        raise ValueError(
            f"row-count mismatch: {teacher_cols.shape[0]} teacher columns vs {student_rows.shape[0]} pillars"
        )
    if teacher_cols.shape[0] == 0 or params is None:
        return teacher_cols, student_rows
    return domain_transfer(teacher_cols, params), student_rows


@dataclass
class CrossAttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    @classmethod
    def init(cls, width, rng, d_k=None):
        d_k = d_k or width
        s = 1.0 / np.sqrt(width)
        return cls(
            Tensor(rng.normal(0.0, s, (width, d_k)), requires_grad=True),
            Tensor(rng.normal(0.0, s, (width, d_k)), requires_grad=True),
            Tensor(rng.normal(0.0, s, (width, width)), requires_grad=True),
        )

    @property
    def d_k(self):
        return self.w_q.shape[1]

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v]


def attention_weights(f_v, f_b, p: CrossAttentionParams) -> Tensor:
    q = ag.matmul(f_v, p.w_q)
    k = ag.matmul(f_b, p.w_k)
    return ag.softmax_rows(ag.matmul(q, ag.transpose(k)) * (1.0 / np.sqrt(p.d_k)))


def cross_attention(f_v, f_b, p: CrossAttentionParams) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V with Q, V from the teacher rows and K from the student."""
    f_v, f_b = ag.as_tensor(f_v), ag.as_tensor(f_b)
    if f_v.shape != f_b.shape:
        raise ValueError(f"cross_attention needs equal shapes, got {f_v.shape} and {f_b.shape}")
    if p.w_q.shape[0] != f_v.shape[1] or p.w_v.shape[1] != f_v.shape[1]:
        raise ValueError(f"projection shapes {p.w_q.shape}/{p.w_v.shape} do not fit width {f_v.shape[1]}")
    if f_v.shape[0] == 0:
        return f_v
    return ag.matmul(attention_weights(f_v, f_b, p), ag.matmul(f_v, p.w_v))


def direction_distance(a, b, eps: float = ag.DEFAULT_EPS) -> Tensor:
    """Per-row squared distance between unit-normalized rows, shape ``(N,)``."""
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = ag.l2_normalize_rows(a, eps) - ag.l2_normalize_rows(b, eps)
    return ag.tsum(d * d, axis=1)


def vpd_loss(f_b_attn, f_v) -> Tensor:
    """Mean over rows of ||a/|a| - b/|b|||^2; an empty layer contributes 0."""
    f_b_attn, f_v = ag.as_tensor(f_b_attn), ag.as_tensor(f_v)
    if f_b_attn.shape != f_v.shape:
        raise ValueError(f"vpd_loss shape mismatch: {f_b_attn.shape} vs {f_v.shape}")
    if f_v.shape[0] == 0:
        return Tensor(0.0)
    return ag.mean(direction_distance(f_b_attn, f_v))


def vpd_total(layer_losses) -> Tensor:
    layer_losses = list(layer_losses)
    if not layer_losses:
        raise ValueError("VPD needs at least one distilled layer")
    total = layer_losses[0]
    for loss in layer_losses[1:]:
        total = total + loss
    return total * (1.0 / len(layer_losses))


def row_cosine(a, b) -> float:
    """Mean cosine similarity between matching rows (plain numpy, for monitoring)."""
    a = ag.as_tensor(a).data
    b = ag.as_tensor(b).data
    if a.shape[0] == 0:
        return 0.0
    na = np.maximum(np.linalg.norm(a, axis=1), ag.DEFAULT_EPS)
    nb = np.maximum(np.linalg.norm(b, axis=1), ag.DEFAULT_EPS)
    return float(np.mean((a * b).sum(axis=1) / (na * nb)))
