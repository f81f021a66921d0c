"""The routing policy network: observation encoder, graph-attention
communication rounds, and the pairwise neighbour scoring head.

All routers share one ParamStore. Nothing in the model is sized by the
number of routers, so routers and links can come and go at run time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .nn import tensor as T
from .nn.tensor import Tensor
from .sim import ObsConfig, Snapshot, encode_snapshots

ABLATIONS = ("full", "qsl_only", "oel_qsl", "ecl_qsl")


@dataclass(frozen=True)
class AgentConfig:
    hidden_dim: int = 8
    message_dim: int = 8
    comm_rounds: int = 2
    tau: float = 0.25
    dropout: float = 0.3
    ablation: str = "full"
    quantize_bits: int = 0
    message_interval: int = 1
    obs: ObsConfig = field(default_factory=ObsConfig)
    # straight-through quantisation inside training forwards as well
    quantize_in_training: bool = False

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.comm_rounds < 0 or self.hidden_dim < 1 or self.message_dim < 1:
            raise ValueError("comm_rounds must be >= 0 and dims positive")
        if self.quantize_bits not in (0, 1):
            raise ValueError("quantize_bits must be 0 or 1")
        if self.message_interval < 1:
            raise ValueError("message_interval must be >= 1")

    @property
    def obs_dim(self) -> int:
        return self.obs.dim

    @property
    def rounds(self) -> int:
        return 0 if self.ablation in ("qsl_only", "oel_qsl") else self.comm_rounds

    @property
    def feature_dim(self) -> int:
        base = self.obs_dim if self.ablation in ("qsl_only", "ecl_qsl") else self.message_dim
        if self.ablation == "qsl_only":
            return base
        return base + self.rounds * self.message_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "AgentConfig":
        doc = dict(doc)
        doc["obs"] = ObsConfig(**doc.get("obs", {}))
        return cls(**doc)


def overhead_bits(config: AgentConfig) -> float:
    """Bits each router broadcasts per step."""
    bits = 32 if config.quantize_bits == 0 else config.quantize_bits
    return config.message_dim * bits / config.message_interval


def init_params(config: AgentConfig, seed: int = 0) -> nn.ParamStore:
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    h, m = config.hidden_dim, config.message_dim
    if config.ablation in ("full", "oel_qsl"):
        nn.init_mlp2(store, "f1", config.obs_dim, h, m, rng)
    d_in = config.obs_dim if config.ablation == "ecl_qsl" else m
    for c in range(1, config.rounds + 1):
        nn.init_attention(store, f"ecl{c}", d_in, m, rng)
        nn.init_mlp2(store, f"ecl{c}.f2", m, h, m, rng)
        d_in = m
    nn.init_mlp2(store, "f3", 2 * config.feature_dim, h, 1, rng)
    return store


# ------------------------------------------------------------------ graph batches


@dataclass
class GraphBatch:
    """Several snapshots stacked block-diagonally (rows = routers)."""

    x: np.ndarray
    indptr: np.ndarray
    src: np.ndarray
    offsets: np.ndarray
    snapshots: list

    @classmethod
    def from_snapshots(cls, snaps: list[Snapshot]) -> "GraphBatch":
        sizes = np.array([len(s.ids) for s in snaps], dtype=np.int64)
        offsets = np.zeros(len(snaps) + 1, dtype=np.int64)
        np.cumsum(sizes, out=offsets[1:])
        ptrs, srcs = [np.zeros(1, dtype=np.int64)], []
        edge_base = 0
        for b, s in enumerate(snaps):
            indptr, indices, _ = s.topology.csr
            ptrs.append(indptr[1:] + edge_base)
            srcs.append(indices + offsets[b])
            edge_base += len(indices)
        return cls(
            x=encode_snapshots(snaps),
            indptr=np.concatenate(ptrs),
            src=np.concatenate(srcs) if srcs else np.zeros(0, dtype=np.int64),
            offsets=offsets,
            snapshots=list(snaps),
        )

    def row(self, b: int, router) -> int:
        return int(self.offsets[b]) + self.snapshots[b].topology.index[router]

    @property
    def size(self) -> int:
        return int(self.offsets[-1])


@dataclass
class MessageState:
    """Last broadcast message per (round, router) for the stale-message variant."""

    cache: dict = field(default_factory=dict)
    step: int = 0

    def reset(self):
        self.cache.clear()
        self.step = 0


# ------------------------------------------------------------------ layers


def encode_observation(store: nn.ParamStore, x: Tensor, train: bool = False) -> Tensor:
    """h0 = F1(o): two-layer MLP, sigmoid output in (0, 1)."""
    return nn.mlp2(store, "f1", x, train, "sigmoid")


def _transmit(config: AgentConfig, h: Tensor, round_: int, graph: GraphBatch, train: bool, messages):
    sigmoid_msg = not (config.ablation == "ecl_qsl" and round_ == 1)
    out = h
    if config.quantize_bits == 1 and sigmoid_msg and (not train or config.quantize_in_training):
        out = T.threshold(out, 0.5)
    if messages is None or config.message_interval == 1 or train:
        return out
    ids = [int(r) for s in graph.snapshots for r in s.ids]
    table = messages.cache.setdefault(round_, {})
    if messages.step % config.message_interval == 0:
        for k, r in enumerate(ids):
            table[r] = out.data[k].copy()
        return out
    data = out.data.copy()
    for k, r in enumerate(ids):
        if r in table:
            data[k] = table[r]
    return Tensor(data)


def run_communication(
    store: nn.ParamStore,
    config: AgentConfig,
    h0: Tensor,
    graph: GraphBatch,
    train: bool = False,
    rng=None,
    messages: MessageState | None = None,
) -> Tensor:
    """C rounds of neighbour attention; returns f = concat(h0, ..., hC)."""
    if h0.data.shape[0] != graph.size:
        raise ValueError(f"need h0 for all {graph.size} active routers, got {h0.data.shape[0]}")
    hs = [h0]
    h = h0
    for c in range(1, config.rounds + 1):
        sent = _transmit(config, h, c, graph, train, messages)
        g, _ = nn.graph_attention(
            store, f"ecl{c}", h, sent, graph.indptr, graph.src, config.tau, config.dropout, rng, train
        )
        h = nn.mlp2(store, f"ecl{c}.f2", g, train, "sigmoid")
        hs.append(h)
    return T.concat(hs)


def features(
    store: nn.ParamStore,
    config: AgentConfig,
    graph: GraphBatch,
    train: bool = False,
    rng=None,
    messages: MessageState | None = None,
) -> Tensor:
    x = Tensor(graph.x)
    if config.ablation == "qsl_only":
        return x
    if config.ablation == "ecl_qsl":
        return run_communication(store, config, x, graph, train, rng, messages)
    h0 = encode_observation(store, x, train)
    if config.ablation == "oel_qsl":
        return h0
    return run_communication(store, config, h0, graph, train, rng, messages)


def score_pairs(store: nn.ParamStore, feats: Tensor, i_rows: np.ndarray, j_rows: np.ndarray, train: bool = False) -> Tensor:
    """Q[i, j] = F3(concat(f_i, f_j)) for each (i_rows[k], j_rows[k])."""
    pair = T.concat([T.take(feats, i_rows), T.take(feats, j_rows)])
    return nn.mlp2(store, "f3", pair, train, "none")


def score_neighbors(store: nn.ParamStore, f_i: np.ndarray, f_neighbors: dict) -> dict:
    """Eval-mode scores for one router given its feature and its neighbours'."""
    if not f_neighbors:
        raise ValueError("router has no neighbours to score")
    order = sorted(f_neighbors)
    rows = np.vstack([np.asarray(f_i)[None, :]] + [np.asarray(f_neighbors[j])[None, :] for j in order])
    q = score_pairs(store, Tensor(rows), np.zeros(len(order), dtype=np.int64), np.arange(1, len(order) + 1))
    return {j: float(v) for j, v in zip(order, q.data[:, 0])}


def select_action(q_scores: dict, epsilon: float, rng):
    if not q_scores:
        raise ValueError("no candidate next hops")
    order = sorted(q_scores)
    if epsilon > 0 and rng.random() < epsilon:
        return order[int(rng.integers(len(order)))]
    best = order[0]
    for j in order[1:]:
        if q_scores[j] > q_scores[best]:
            best = j
    return best


def acting_rows(snap: Snapshot) -> list:
    topo = snap.topology
    return [int(r) for r, n in zip(snap.ids, snap.queue_len) if n > 0 and topo.neighbors(int(r))]


def q_table(
    store: nn.ParamStore,
    config: AgentConfig,
    snap: Snapshot,
    routers=None,
    messages: MessageState | None = None,
) -> dict:
    """Eval-mode {router: {neighbour: Q}} for the given (default: acting) routers."""
    routers = acting_rows(snap) if routers is None else routers
    if not routers:
        return {}
    graph = GraphBatch.from_snapshots([snap])
    feats = features(store, config, graph, train=False, messages=messages)
    topo = snap.topology
    idx = topo.index
    i_rows, j_rows, keys = [], [], []
    for r in routers:
        for j in topo.neighbors(r):
            i_rows.append(idx[r])
            j_rows.append(idx[j])
            keys.append((r, j))
    q = score_pairs(store, feats, np.asarray(i_rows), np.asarray(j_rows)).data[:, 0]
    out: dict = {r: {} for r in routers}
    for (r, j), v in zip(keys, q):
        out[r][j] = float(v)
    return out


def act_all(
    store: nn.ParamStore,
    snap: Snapshot,
    config: AgentConfig,
    epsilon: float,
    rng,
    messages: MessageState | None = None,
) -> dict:
    """Next hop for every router holding a packet (routers without neighbours hold)."""
    table = q_table(store, config, snap, messages=messages)
    if messages is not None:
        messages.step += 1
    return {r: select_action(table[r], epsilon, rng) for r in sorted(table)}


class DramaPolicy:
    """Adapter to the simulator policy protocol (decide / observe)."""

    name = "drama"

    def __init__(self, store: nn.ParamStore, config: AgentConfig, epsilon: float = 0.0, seed: int = 0):
        self.store = store
        self.config = config
        self.epsilon = epsilon
        self.rng = np.random.default_rng(seed)
        self.messages = MessageState() if config.message_interval > 1 else None

    def decide(self, sim) -> dict:
        return act_all(self.store, sim.snapshot(), self.config, self.epsilon, self.rng, self.messages)

    def observe(self, sim, outcome) -> None:
        pass
