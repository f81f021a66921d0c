"""Parameter store, layers and the adaptive-moment optimizer."""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Named parameters (+ grads), batch-norm buffers and optimizer moments.

    Iteration is always in sorted-name order so every traversal (optimizer,
    checkpoint, hashing) is deterministic.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.opt_steps = 0

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name} already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad(self, name: str) -> np.ndarray:
        p = self.params[name]
        return np.zeros_like(p.data) if p.grad is None else p.grad

    def size(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def copy(self) -> "ParamStore":
        """Deep copy of parameters and buffers (no grads, no moments)."""
        out = ParamStore()
        for name in self.names():
            out.add(name, self.params[name].data.copy())
        out.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: self.params[n].data for n in self.names()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self.names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        for name in sorted(self.buffers):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.buffers[name]).tobytes())
        return h.hexdigest()


# ------------------------------------------------------------------ init


def init_linear(store: ParamStore, name: str, fan_in: int, fan_out: int, rng, bias: bool = True) -> None:
    bound = 1.0 / np.sqrt(fan_in)
    store.add(f"{name}.W", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    if bias:
        store.add(f"{name}.b", np.zeros(fan_out))


def init_batch_norm(store: ParamStore, name: str, features: int) -> None:
    store.add(f"{name}.gamma", np.ones(features))
    store.add(f"{name}.beta", np.zeros(features))
    store.buffers[f"{name}.running_mean"] = np.zeros(features)
    store.buffers[f"{name}.running_var"] = np.ones(features)


# ------------------------------------------------------------------ layers


def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    b = store.params.get(f"{name}.b")
    return T.linear(x, store[f"{name}.W"], b)


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return T.relu(x)
    if kind == "sigmoid":
        return T.sigmoid(x)
    if kind in ("none", "linear", None):
        return x
    raise ValueError(f"unknown activation {kind!r}")


def batch_norm(
    store: ParamStore,
    name: str,
    x: Tensor,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    gamma, beta = store[f"{name}.gamma"], store[f"{name}.beta"]
    rm_key, rv_key = f"{name}.running_mean", f"{name}.running_var"
    if train:
        n = x.data.shape[0]
        if n < 2:
            raise ValueError(f"batch norm {name}: training needs at least 2 rows, got {n}")
        out, mu, var = T.batch_norm_train(x, gamma, beta, eps)
        unbiased = var * n / (n - 1)
        store.buffers[rm_key] = (1 - momentum) * store.buffers[rm_key] + momentum * mu
        store.buffers[rv_key] = (1 - momentum) * store.buffers[rv_key] + momentum * unbiased
        return out
    inv = 1.0 / np.sqrt(store.buffers[rv_key] + eps)
    return T.affine_const(x, inv, -store.buffers[rm_key] * inv, gamma, beta)


def mlp2(store: ParamStore, name: str, x: Tensor, train: bool, out_act: str) -> Tensor:
    """linear -> batch norm -> relu -> linear -> out_act."""
    h = linear(store, f"{name}.l1", x)
    h = batch_norm(store, f"{name}.bn", h, train)
    h = T.relu(h)
    return activation(out_act, linear(store, f"{name}.l2", h))


def init_mlp2(store: ParamStore, name: str, d_in: int, d_hidden: int, d_out: int, rng) -> None:
    init_linear(store, f"{name}.l1", d_in, d_hidden, rng)
    init_batch_norm(store, f"{name}.bn", d_hidden)
    init_linear(store, f"{name}.l2", d_hidden, d_out, rng)


def init_attention(store: ParamStore, name: str, d_in: int, d_att: int, rng) -> None:
    for proj in ("wq", "wk", "wv"):
        init_linear(store, f"{name}.{proj}", d_in, d_att, rng, bias=False)


def graph_attention(
    store: ParamStore,
    name: str,
    queries: Tensor,
    messages: Tensor,
    indptr: np.ndarray,
    src: np.ndarray,
    tau: float,
    dropout_p: float = 0.0,
    rng=None,
    train: bool = False,
) -> tuple[Tensor, Tensor]:
    """Neighbour attention for every row at once.

    Row ``r`` attends over ``messages[src[indptr[r]:indptr[r+1]]]``; rows with
    no neighbours aggregate to zero. Returns (aggregated rows, coefficients).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not 0 <= dropout_p < 1:
        raise ValueError("dropout_p must be in [0, 1)")
    m = queries.data.shape[0]
    dst = np.repeat(np.arange(m), np.diff(indptr))
    q = linear(store, f"{name}.wq", queries)
    k = linear(store, f"{name}.wk", messages)
    v = linear(store, f"{name}.wv", messages)
    scores = T.scale(T.rowdot(T.take(q, dst), T.take(k, src)), tau)
    coef = T.segment_softmax(scores, indptr)
    if train and dropout_p > 0:
        keep = rng.random(coef.data.shape[0]) >= dropout_p
        coef = T.mul_const(coef, keep / (1.0 - dropout_p))
    return T.segment_weighted_sum(coef, T.take(v, src), indptr), coef


def scaled_attention(
    store: ParamStore,
    name: str,
    query: Tensor,
    keys: Tensor,
    values: Tensor,
    tau: float,
    dropout_p: float = 0.0,
    rng=None,
    train: bool = False,
) -> tuple[Tensor, Tensor]:
    """Single-query form: query (1, d), keys/values (n, d) -> (1, d_att), (1, n).

    Keys and values are separate inputs here; in the routing model both are
    the neighbours' messages.
    """
    n = keys.data.shape[0]
    if n == 0:
        raise ValueError("attention over an empty neighbour set")
    if values.data.shape[0] != n:
        raise ValueError("keys and values must have the same number of rows")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not 0 <= dropout_p < 1:
        raise ValueError("dropout_p must be in [0, 1)")
    q = linear(store, f"{name}.wq", query)
    k = linear(store, f"{name}.wk", keys)
    v = linear(store, f"{name}.wv", values)
    indptr = np.array([0, n])
    scores = T.scale(T.rowdot(T.take(q, np.zeros(n, dtype=np.int64)), k), tau)
    coef = T.segment_softmax(scores, indptr)
    if train and dropout_p > 0:
        keep = rng.random(n) >= dropout_p
        coef = T.mul_const(coef, keep / (1.0 - dropout_p))
    out = T.segment_weighted_sum(coef, v, indptr)
    return out, Tensor(coef.data[None, :])


# ------------------------------------------------------------------ optimizer


def optimizer_step(
    store: ParamStore,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected adaptive-moment update of every parameter."""
    b1, b2 = betas
    store.opt_steps += 1
    t = store.opt_steps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in store.names():
        p = store.params[name]
        g = store.grad(name)
        m, v = store.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        store.moments[name] = (m, v)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store
