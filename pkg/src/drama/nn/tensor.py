"""A small reverse-mode autodiff engine over numpy arrays.

Only the handful of ops the routing model needs are provided. Every op
checks its output for NaN/Inf and raises ``FloatingPointError``.
"""

from __future__ import annotations

import numpy as np

from .. import kernels


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape})"

    def numpy(self) -> np.ndarray:
        return self.data


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"non-finite value produced by {op}")
    return out


def _make(out, parents, backward_fn, op):
    _finite(out, op)
    if any(p.requires_grad for p in parents):
        return Tensor(out, parents, backward_fn, requires_grad=True, name=op)
    return Tensor(out, name=op)


def backprop(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if loss.data.size != 1:
        raise ValueError("backprop needs a scalar loss")
    if not loss.requires_grad:
        raise RuntimeError("backward without forward: loss has no recorded graph")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


# ------------------------------------------------------------------ ops


def matmul(x: Tensor, w: Tensor) -> Tensor:
    xd, wd = x.data, w.data
    return _make(xd @ wd, (x, w), lambda g: (g @ wd.T, xd.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear: input dim {xd.shape[-1]} does not match weight {wd.shape}")
    out = xd @ wd
    if b is None:
        return _make(out, (x, w), lambda g: (g @ wd.T, xd.T @ g), "linear")
    out = out + b.data
    return _make(out, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)), "linear")


def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a constant array (masks, weights)."""
    return _make(x.data * c, (x,), lambda g: (g * c,), "mul_const")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def threshold(x: Tensor, level: float = 0.5) -> Tensor:
    """Binarise at ``level``; the backward pass is straight-through."""
    out = (x.data > level).astype(np.float64)
    return _make(out, (x,), lambda g: (g,), "threshold")


def take(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``x[idx]``; repeated indices accumulate in the backward pass."""
    xd = x.data
    if xd.ndim != 2:
        raise ValueError("take expects a 2-D tensor")

    def back(g):
        return (kernels.scatter_add_rows(np.ascontiguousarray(g), idx, xd.shape[0]),)

    return _make(xd[idx], (x,), back, "take")


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    if len(parts) == 1:
        return parts[0]
    sizes = [p.data.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _make(out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = np.einsum("ij,ij->i", ad, bd)
    return _make(out, (a, b), lambda g: (g[:, None] * bd, g[:, None] * ad), "rowdot")


def segment_softmax(scores: Tensor, indptr: np.ndarray) -> Tensor:
    out = kernels.segment_softmax(scores.data, indptr)
    return _make(
        out,
        (scores,),
        lambda g: (kernels.segment_softmax_backward(out, np.ascontiguousarray(g), indptr),),
        "segment_softmax",
    )


def segment_weighted_sum(coef: Tensor, values: Tensor, indptr: np.ndarray) -> Tensor:
    """out[s] = sum_{e in segment s} coef[e] * values[e]."""
    cd, vd = coef.data, values.data
    counts = np.diff(indptr)
    out = kernels.segment_sum(cd[:, None] * vd, indptr)

    def back(g):
        ge = np.repeat(g, counts, axis=0)
        return np.einsum("ij,ij->i", ge, vd), cd[:, None] * ge

    return _make(out, (coef, values), back, "segment_weighted_sum")


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Normalise by batch statistics. Returns (output, batch mean, biased batch var)."""
    xd = x.data
    n = xd.shape[0]
    mean = xd.mean(axis=0)
    var = xd.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def back(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(out, (x, gamma, beta), back, "batch_norm"), mean, var


def affine_const(x: Tensor, mult: np.ndarray, shift: np.ndarray, gamma: Tensor, beta: Tensor) -> Tensor:
    """gamma * (x * mult + shift) + beta with frozen mult/shift (eval-mode batch norm)."""
    xd = x.data
    xhat = xd * mult + shift
    gd = gamma.data
    out = xhat * gd + beta.data
    return _make(
        out,
        (x, gamma, beta),
        lambda g: (g * gd * mult, (g * xhat).sum(axis=0), g.sum(axis=0)),
        "batch_norm_eval",
    )


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def total(x: Tensor) -> Tensor:
    shape = x.data.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    shape = x.data.shape
    n = x.data.size
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """sum(w * x) as a scalar; ``w`` is a constant."""
    return _make(np.array(float((x.data * w).sum())), (x,), lambda g: (float(g) * w,), "weighted_sum")
