"""Dense float64 tensors with a small reverse-mode tape.

Parameters and gradients are plain ``dict[str, np.ndarray]`` (``ParamSet`` /
``GradSet``). A loss function receives the parameters wrapped as :class:`Var`
leaves, composes the primitives below and returns a scalar ``Var``;
:func:`value_and_grad` replays the recorded operations backwards.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

ParamSet = Dict[str, np.ndarray]
GradSet = Dict[str, np.ndarray]

DTYPE = np.float64
NORM_EPS = 1e-8
FD_STEP = 1e-5


class Var:
    """A node on the tape: forward value plus the closure that pushes its
    adjoint to the parents."""

    __slots__ = ("value", "grad", "parents", "backward", "op", "requires_grad")

    def __init__(self, value, parents: Sequence["Var"] = (), backward=None,
                 op: str = "leaf", requires_grad: bool = False):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward = backward
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=DTYPE))


def _check(op: str, value: np.ndarray) -> np.ndarray:
    # a finite sum implies finite entries; only fall back to the full scan
    # (which also tolerates a sum overflowing on huge finite values) otherwise
    if not math.isfinite(value.sum()) and not np.isfinite(value).all():
        raise NumericError(op)
    return value


def _node(op, value, parents, backward) -> Var:
    return Var(_check(op, value), parents, backward, op)


def _accumulate(v: Var, g: np.ndarray) -> None:
    if not v.requires_grad:
        return
    if v.grad is None:
        v.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        v.grad += g


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: shapes {a.value.shape} and {b.value.shape} do not align")

    def back(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return _node("matmul", a.value @ b.value, (a, b), back)


def add(a, b) -> Var:
    """Elementwise sum; ``b`` may be a 1-D bias broadcast over the rows of ``a``."""
    a, b = as_var(a), as_var(b)
    sa, sb = a.value.shape, b.value.shape
    bias = sa != sb
    if bias and not (b.value.ndim == 1 and a.value.ndim == 2 and sa[1] == sb[0]):
        raise DimensionError(f"add: shapes {sa} and {sb} are not compatible")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g.sum(axis=0) if bias else g)

    return _node("add", a.value + b.value, (a, b), back)


def sub(a, b) -> Var:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"mul: shapes {a.value.shape} and {b.value.shape} differ")

    def back(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    return _node("mul", a.value * b.value, (a, b), back)


def scale(a, c: float) -> Var:
    a = as_var(a)
    c = float(c)

    def back(g):
        _accumulate(a, g * c)

    return _node("scale", a.value * c, (a,), back)


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Var:
    a = as_var(a)
    s = sigmoid_array(a.value)

    def back(g):
        _accumulate(a, g * s * (1.0 - s))

    return _node("sigmoid", s, (a,), back)


def concat(parts: Sequence, axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        shapes = [p.value.shape for p in parts]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from exc
    sizes = np.cumsum([p.value.shape[axis] for p in parts])[:-1]

    def back(g):
        for p, gp in zip(parts, np.split(g, sizes, axis=axis)):
            _accumulate(p, gp)

    return _node("concat", value, parts, back)


def l2_normalize(a, eps: float = NORM_EPS) -> Var:
    """Row-wise ``x / (||x||_2 + eps)``."""
    a = as_var(a)
    x = a.value
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    denom = norm + eps

    def back(g):
        dot = np.sum(x * g, axis=-1, keepdims=True)
        # d||x||/dx = x/||x||; take 0 at the origin.
        safe = np.where(norm > 0, norm, 1.0)
        coef = np.where(norm > 0, dot / (safe * denom * denom), 0.0)
        _accumulate(a, g / denom - x * coef)

    return _node("l2_normalize", x / denom, (a,), back)


def sum_all(a) -> Var:
    a = as_var(a)

    def back(g):
        _accumulate(a, np.full(a.value.shape, float(g)))

    return _node("sum", np.asarray(a.value.sum()), (a,), back)


def mean_all(a) -> Var:
    a = as_var(a)
    n = a.value.size

    def back(g):
        _accumulate(a, np.full(a.value.shape, float(g) / n))

    return _node("mean", np.asarray(a.value.mean()), (a,), back)


def gather(a, index: np.ndarray) -> Var:
    """Select rows ``a[index]``."""
    a = as_var(a)
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        acc = np.zeros_like(a.value)
        np.add.at(acc, index, g)
        _accumulate(a, acc)

    return _node("gather", a.value[index], (a,), back)


def segment_sum(a, segment: np.ndarray, num_segments: int) -> Var:
    """Row ``k`` of the result is the sum of rows ``a[i]`` with ``segment[i] == k``.

    Rows are reduced in input order, so callers wanting order-independent
    results sort ``segment`` first.
    """
    a = as_var(a)
    segment = np.asarray(segment, dtype=np.int64)
    out = np.zeros((num_segments,) + a.value.shape[1:], dtype=DTYPE)
    np.add.at(out, segment, a.value)

    def back(g):
        _accumulate(a, g[segment])

    return _node("segment_sum", out, (a,), back)


def bce_with_logits(logits, labels: np.ndarray) -> Var:
    """Summed binary cross-entropy of ``sigmoid(logits)`` against 0/1 labels."""
    z = as_var(logits)
    y = np.asarray(labels, dtype=DTYPE).reshape(z.value.shape)
    x = z.value
    loss = np.sum(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x))))

    def back(g):
        _accumulate(z, float(g) * (sigmoid_array(x) - y))

    return _node("bce", np.asarray(loss), (z,), back)


def mse(pred, target: np.ndarray) -> Var:
    p = as_var(pred)
    t = np.asarray(target, dtype=DTYPE).reshape(p.value.shape)
    diff = p.value - t

    def back(g):
        _accumulate(p, float(g) * 2.0 * diff / diff.size)

    return _node("mse", np.asarray(np.mean(diff * diff)), (p,), back)


def softmax_cross_entropy(logits, target: np.ndarray) -> Var:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    z = as_var(logits)
    target = np.asarray(target, dtype=np.int64)
    x = z.value
    shifted = x - x.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(x.shape[0])
    loss = -logp[rows, target].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, target] -= 1.0
        _accumulate(z, float(g) * p / x.shape[0])

    return _node("cross_entropy", np.asarray(loss), (z,), back)


# ------------------------------------------------------------------ drivers

def _topological(root: Var) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var) -> None:
    if root.value.size != 1:
        raise DimensionError(f"backward needs a scalar output, got shape {root.value.shape}")
    root.grad = np.ones_like(root.value)
    for node in reversed(_topological(root)):
        if node.backward is not None and node.grad is not None:
            _check(f"backward:{node.op}", node.grad)
            node.backward(node.grad)


def leaves(params: ParamSet) -> Dict[str, Var]:
    return {k: Var(np.asarray(v, dtype=DTYPE), requires_grad=True) for k, v in params.items()}


def value_and_grad(loss_fn: Callable, params: ParamSet, *args, **kwargs):
    """Evaluate ``loss_fn(vars, *args, **kwargs)`` and return ``(loss, grads)``.

    Every parameter gets a gradient entry; parameters the loss does not touch
    get zeros.
    """
    wrapped = leaves(params)
    out = loss_fn(wrapped, *args, **kwargs)
    backward(out)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
             for k, v in wrapped.items()}
    return float(out.value), grads


def loss_value(loss_fn: Callable, params: ParamSet, *args, **kwargs) -> float:
    wrapped = {k: Var(np.asarray(v, dtype=DTYPE)) for k, v in params.items()}
    return float(loss_fn(wrapped, *args, **kwargs).value)


def numeric_grad(loss_fn: Callable, params: ParamSet, *args, step: float = FD_STEP,
                 names: Iterable[str] | None = None, **kwargs) -> GradSet:
    """Central finite differences, one coordinate at a time."""
    work = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in params.items()}
    out = {}
    for name in (names if names is not None else work):
        arr = work[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_value(loss_fn, work, *args, **kwargs)
            flat[i] = orig - step
            down = loss_value(loss_fn, work, *args, **kwargs)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over a whole tensor."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(num / den)


def gradient_check(loss_fn: Callable, params: ParamSet, *args, step: float = FD_STEP,
                   **kwargs) -> Dict[str, float]:
    """Relative error of the tape gradient against central differences, per parameter."""
    _, analytic = value_and_grad(loss_fn, params, *args, **kwargs)
    numeric = numeric_grad(loss_fn, params, *args, step=step, **kwargs)
    return {k: relative_error(analytic[k], numeric[k]) for k in params}


# ------------------------------------------------------------ param helpers

def zeros_like(params: ParamSet) -> GradSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


def axpy(alpha: float, x: GradSet, y: ParamSet) -> ParamSet:
    """``y + alpha * x`` as a new ParamSet."""
    return {k: y[k] + alpha * x[k] for k in y}


def tree_add(a: GradSet, b: GradSet) -> GradSet:
    return {k: a[k] + b[k] for k in a}


def copy_params(params: ParamSet) -> ParamSet:
    return {k: np.array(v, copy=True) for k, v in params.items()}
