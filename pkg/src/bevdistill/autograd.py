"""Small dense-tensor engine with reverse-mode differentiation.

Every value is a float64 numpy array wrapped in :class:`Tensor`. Operations
that touch a tensor with ``requires_grad`` record their parents and a
backward closure; :func:`backward` builds a :class:`Tape` (the topologically
ordered record of those operations) and replays it in reverse.

Only the operations the distillation losses need are provided. Binary
elementwise ops accept numpy-style broadcasting, which is undone on the way
back by summing over the broadcast axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_EPS = 1e-12


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    # make ``ndarray <op> Tensor`` dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _result(out, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _result(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), backward, "log")


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _result(out, (x,), backward, "sqrt")


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)`` for a constant floor; ties route to ``x``."""
    x = as_tensor(x)
    keep = x.data >= floor

    def backward(g):
        return (g * keep,)

    return _result(np.where(keep, x.data, floor), (x,), backward, "maximum")


# ---------------------------------------------------------------- shape / linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g.T,)

    return _result(x.data.T, (x,), backward, "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) / float(count)


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate on the way back."""
    x = as_tensor(x)
    if isinstance(index, Tensor):
        raise TypeError("index tensors are not differentiable; pass numpy arrays")

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(x.data[index], (x,), backward, "take")


def scatter_rows(x: Tensor, index: np.ndarray, num_rows: int) -> Tensor:
    """Sum rows of ``x`` into ``num_rows`` output rows: ``out[index[r]] += x[r]``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if len(index) != x.shape[0]:
        raise ValueError(f"scatter index length {len(index)} != row count {x.shape[0]}")
    out = np.zeros((num_rows,) + x.shape[1:])
    np.add.at(out, index, x.data)

    def backward(g):
        return (g[index],)

    return _result(out, (x,), backward, "scatter_rows")


def segment_max(x: Tensor, segment: np.ndarray, num_segments: int) -> Tensor:
    """Per-segment elementwise max over rows.

    Rows of one segment are compared in storage order and the first maximum
    wins, so the subgradient goes to the earliest row among ties. Empty
    segments produce zero rows.
    """
    x = as_tensor(x)
    segment = np.asarray(segment, dtype=np.int64)
    n, width = x.shape
    out = np.zeros((num_segments, width))
    winner = np.full((num_segments, width), -1, dtype=np.int64)
    for r in range(n):
        s = segment[r]
        row = x.data[r]
        better = (winner[s] < 0) | (row > out[s])
        out[s] = np.where(better, row, out[s])
        winner[s] = np.where(better, r, winner[s])

    def backward(g):
        grad = np.zeros_like(x.data)
        seg_idx, col_idx = np.nonzero(winner >= 0)
        grad[winner[seg_idx, col_idx], col_idx] += g[seg_idx, col_idx]
        return (grad,)

    return _result(out, (x,), backward, "segment_max")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[bounds[k] : bounds[k + 1]] for k in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, backward, "concat")


# ---------------------------------------------------------------- row-wise numerics


def softmax_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result(out, (x,), backward, "softmax_rows")


def log_softmax_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax_rows")


def l2_normalize_rows(x: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Divide each row by ``max(||row||_2, eps)``."""
    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    active = norms > eps
    denom = np.where(active, norms, eps)
    out = x.data / denom

    def backward(g):
        # Inside the eps floor the map is linear (x / eps).
        radial = (g * out).sum(axis=1, keepdims=True)
        return (np.where(active, (g - out * radial) / denom, g / eps),)

    return _result(out, (x,), backward, "l2_normalize_rows")


def mse_mean(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse_mean shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return mean(diff * diff)


# ---------------------------------------------------------------- tape


@dataclass
class Tape:
    """Operations reachable from ``root`` in a valid evaluation order."""

    root: Tensor
    records: list = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(root, order)

    def leaves(self) -> list:
        return [t for t in self.records if t._backward is None]

    def replay(self, seed: np.ndarray) -> dict:
        grads = {id(self.root): seed}
        for node in reversed(self.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        return grads


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.from_output(loss)
    if loss.requires_grad:
        tape.replay(np.ones_like(loss.data))
    return tape


def grad(loss: Tensor, params: Iterable[Tensor]) -> list:
    """Fresh gradients of ``loss`` w.r.t. ``params`` (zeros when unreachable)."""
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    backward(loss)
    out = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p, s in zip(params, saved):
        p.grad = s
    return out


# ---------------------------------------------------------------- verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: int
    worst_index: tuple
    per_param: list

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


REL_FLOOR = 1e-6


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    analytic: Sequence[np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` with central differences.

    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, 1e-6)``;
    the floor keeps coordinates whose true gradient is zero from turning
    roundoff into a failure. ``analytic`` overrides the tape gradients
    (used to test the harness itself).
    """
    params = list(params)
    if analytic is None:
        analytic = grad(fn(), params)
    per_param = []
    worst = (0.0, -1, ())
    for k, p in enumerate(params):
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2.0 * h)
        a = np.asarray(analytic[k], dtype=np.float64)
        rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), REL_FLOOR)
        err = float(rel.max()) if rel.size else 0.0
        per_param.append(err)
        if err > worst[0] or worst[1] < 0:
            idx = np.unravel_index(int(rel.argmax()), rel.shape) if rel.size else ()
            worst = (err, k, tuple(int(i) for i in idx))
    return GradCheckReport(worst[0], worst[1], worst[2], per_param)
