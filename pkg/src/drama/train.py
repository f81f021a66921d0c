"""Replay, the TD and estimated-cost losses, soft target updates and the
episode loop.

Transitions are stored jointly: one record per simulator step holding the
pre-step snapshot, the post-step snapshot and one row per router whose
forwarding attempt completed. A batch of B records is scored as one
block-diagonal graph and the loss is the mean over records of the mean over
that record's rows.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .agent import AgentConfig, GraphBatch, act_all, features, init_params, score_pairs
from .nn import tensor as T
from .nn.tensor import Tensor
from .sim import SimConfig, Simulator, Snapshot
from .topo import Link, LinkFailure, RouterAddition, Topology, TopologyEvent, TrafficSpec, costs_to


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    beta: float = 0.01
    train_interval: int = 1
    batch_size: int = 64
    warmup: int = 1000
    lr: float = 1e-3
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.5
    episodes: int = 200
    steps_per_episode: int = 512
    ec_weight: float = 1.0
    buffer_capacity: int = 100_000
    # traffic rates cycled over episodes; empty means the topology file's rate
    lambdas: tuple = ()
    # chance that an episode adds a fresh router or fails a link at step 0
    perturb_prob: float = 0.0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must be in (0, 1]")
        if self.train_interval < 1 or self.batch_size < 1 or self.buffer_capacity < 1:
            raise ValueError("train_interval, batch_size and buffer_capacity must be positive")
        if self.ec_weight < 0:
            raise ValueError("ec_weight must be non-negative")
        if not 0 <= self.perturb_prob <= 1:
            raise ValueError("perturb_prob must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        doc["lambdas"] = tuple(doc.get("lambdas", ()))
        return cls(**doc)

    def epsilon(self, env_step: int) -> float:
        horizon = self.eps_fraction * self.episodes * self.steps_per_episode
        if horizon <= 0 or env_step >= horizon:
            return self.eps_end
        return self.eps_start + (self.eps_end - self.eps_start) * env_step / horizon


def _ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenation of arange(s, s + c) for each (s, c)."""
    total = int(counts.sum())
    base = np.repeat(starts - np.cumsum(counts) + counts, counts)
    return base + np.arange(total)


@dataclass
class Transition:
    snapshot: Snapshot
    next_snapshot: Snapshot
    routers: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    wsp: np.ndarray  # NaN where the destination was unreachable
    # dense row indices: routers and actions in ``snapshot``, actions in
    # ``next_snapshot`` (-1 where no bootstrap applies)
    i_local: np.ndarray = None
    j_local: np.ndarray = None
    j_next: np.ndarray = None
    j_next_deg: np.ndarray = None
    j_next_nbrs: np.ndarray = None

    def __post_init__(self):
        idx = self.snapshot.topology.index
        self.i_local = np.array([idx[r] for r in self.routers], dtype=np.int64)
        self.j_local = np.array([idx[a] for a in self.actions], dtype=np.int64)
        nxt = self.next_snapshot.topology
        self.j_next = np.array(
            [nxt.index[a] if not d and a in nxt and nxt.neighbors(a) else -1 for a, d in zip(self.actions, self.dones)],
            dtype=np.int64,
        )
        live = self.j_next[self.j_next >= 0]
        indptr, indices, _ = nxt.csr
        self.j_next_deg = indptr[live + 1] - indptr[live]
        self.j_next_nbrs = indices[_ranges(indptr[live], self.j_next_deg)]

    def __len__(self):
        return len(self.routers)


def wsp_values(snap: Snapshot, routers, actions) -> np.ndarray:
    """Queue-weighted shortest-path cost of each (router, chosen hop) pair."""
    topo = snap.topology
    idx = topo.index
    out = np.full(len(routers), np.nan)
    dist_cache: dict[int, np.ndarray] = {}
    for k, (i, j) in enumerate(zip(routers, actions)):
        z = int(snap.head_dst[idx[i]])
        if z not in topo:
            continue
        dist = dist_cache.get(z)
        if dist is None:
            dist = dist_cache[z] = costs_to(topo, z, snap.queue_len)
        rest = dist[idx[j]]
        if not math.isfinite(rest):
            continue
        enter = 0.0 if j == z else float(snap.queue_len[idx[j]])
        out[k] = topo.link(i, j).length + enter + rest
    return out


def make_transition(snap: Snapshot, next_snap: Snapshot, hops: dict) -> Transition | None:
    """``hops`` maps router -> (next hop, reward, done). Returns None if empty."""
    if not hops:
        return None
    routers = np.array(sorted(hops), dtype=np.int64)
    actions = np.array([hops[r][0] for r in routers], dtype=np.int64)
    return Transition(
        snapshot=snap,
        next_snapshot=next_snap,
        routers=routers,
        actions=actions,
        rewards=np.array([hops[r][1] for r in routers], dtype=np.float64),
        dones=np.array([int(hops[r][2]) for r in routers], dtype=np.int64),
        wsp=wsp_values(snap, routers, actions),
    )


class ReplayBuffer:
    """Fixed-capacity ring; oldest records are overwritten first."""

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.items: list[Transition] = []
        self.head = 0

    def __len__(self):
        return len(self.items)

    def push(self, item: Transition) -> "ReplayBuffer":
        if len(self.items) < self.capacity:
            self.items.append(item)
        else:
            self.items[self.head] = item
            self.head = (self.head + 1) % self.capacity
        return self

    def oldest_first(self) -> list[Transition]:
        return self.items[self.head :] + self.items[: self.head]

    def sample(self, k: int, rng) -> list[Transition]:
        if k > len(self.items):
            raise ValueError(f"cannot sample {k} from {len(self.items)} records")
        return [self.items[i] for i in rng.choice(len(self.items), size=k, replace=False)]


def push(buffer: ReplayBuffer, transition: Transition) -> ReplayBuffer:
    return buffer.push(transition)


# ------------------------------------------------------------------ losses


def _row_weights(batch: list[Transition]) -> np.ndarray:
    return np.concatenate([np.full(len(t), 1.0 / (len(batch) * len(t))) for t in batch])


def predicted_q(store: nn.ParamStore, config: AgentConfig, batch: list[Transition], train: bool = True, rng=None) -> Tensor:
    """Q_{i, a_i}(O) for every row of every record, shape (rows, 1)."""
    graph = GraphBatch.from_snapshots([t.snapshot for t in batch])
    off = graph.offsets
    i_rows = np.concatenate([off[b] + t.i_local for b, t in enumerate(batch)])
    j_rows = np.concatenate([off[b] + t.j_local for b, t in enumerate(batch)])
    feats = features(store, config, graph, train=train, rng=rng)
    return score_pairs(store, feats, i_rows, j_rows, train)


def target_value(target: nn.ParamStore, config: AgentConfig, batch: list[Transition], gamma: float) -> np.ndarray:
    """y = r + (1 - d) * gamma * max_{a' in n_j} Q_{j,a'}(O'; target), eval mode.

    A next hop with no neighbours left counts as terminal.
    """
    rewards = np.concatenate([t.rewards for t in batch])
    boot = np.zeros_like(rewards)
    graph = GraphBatch.from_snapshots([t.next_snapshot for t in batch])
    j_rows, a_rows, counts, owner = [], [], [], []
    base = 0
    for b, t in enumerate(batch):
        live = np.flatnonzero(t.j_next >= 0)
        if len(live):
            off = graph.offsets[b]
            j_rows.append(np.repeat(t.j_next[live] + off, t.j_next_deg))
            a_rows.append(t.j_next_nbrs + off)
            counts.append(t.j_next_deg)
            owner.append(live + base)
        base += len(t)
    if owner:
        counts = np.concatenate(counts)
        feats = features(target, config, graph, train=False)
        q = score_pairs(target, feats, np.concatenate(j_rows), np.concatenate(a_rows)).data[:, 0]
        starts = np.cumsum(counts) - counts
        boot[np.concatenate(owner)] = np.maximum.reduceat(q, starts)
    return rewards + gamma * boot


def td_loss(q: Tensor, y: np.ndarray, weights: np.ndarray) -> Tensor:
    return T.weighted_sum(T.square(T.sub(q, Tensor(y[:, None]))), weights[:, None])


def ec_loss(q: Tensor, wsp: np.ndarray, weights: np.ndarray) -> Tensor:
    """Squared gap to the negated WSP cost; rows without a WSP value count as 0."""
    have = np.isfinite(wsp)
    target = np.where(have, -wsp, 0.0)
    w = np.where(have, weights, 0.0)
    return T.weighted_sum(T.square(T.sub(q, Tensor(target[:, None]))), w[:, None])


def soft_update(store: nn.ParamStore, target: nn.ParamStore, beta: float) -> nn.ParamStore:
    """target <- beta * store + (1 - beta) * target, parameters and batch-norm buffers."""
    if store.names() != target.names():
        raise ValueError("parameter sets differ")
    for name in store.names():
        src, dst = store[name].data, target[name].data
        if src.shape != dst.shape:
            raise ValueError(f"shape mismatch for {name}: {src.shape} vs {dst.shape}")
        if beta == 1:
            target[name].data = src.copy()
        elif beta != 0:
            target[name].data = beta * src + (1 - beta) * dst
    for name, buf in store.buffers.items():
        if beta == 1:
            target.buffers[name] = buf.copy()
        elif beta != 0:
            target.buffers[name] = beta * buf + (1 - beta) * target.buffers[name]
    return target


@dataclass
class StepLosses:
    td: float
    ec: float


def loss_terms(store, target, config: AgentConfig, batch, gamma: float, ec_weight: float, rng, train: bool = True):
    """(total, td, ec) tensors for one batch."""
    weights = _row_weights(batch)
    y = target_value(target, config, batch, gamma)
    q = predicted_q(store, config, batch, train=train, rng=rng)
    td = td_loss(q, y, weights)
    ec = ec_loss(q, np.concatenate([t.wsp for t in batch]), weights)
    total = T.add(td, T.scale(ec, ec_weight)) if ec_weight else td
    return total, td, ec


def train_step(
    store: nn.ParamStore,
    target: nn.ParamStore,
    buffer: ReplayBuffer,
    agent_config: AgentConfig,
    config: TrainConfig,
    rng,
) -> StepLosses | None:
    """One optimizer step on a sampled batch, then a soft target update.

    Returns None (and changes nothing) while the buffer is below warmup.
    """
    if len(buffer) < max(config.warmup, config.batch_size):
        return None
    batch = buffer.sample(config.batch_size, rng)
    total, td, ec = loss_terms(store, target, agent_config, batch, config.gamma, config.ec_weight, rng)
    store.zero_grad()
    T.backprop(total)
    nn.optimizer_step(store, config.lr)
    soft_update(store, target, config.beta)
    return StepLosses(float(td.data), float(ec.data))


# ------------------------------------------------------------------ episode loop


@dataclass
class TrainResult:
    store: nn.ParamStore
    target: nn.ParamStore
    curve: list[dict] = field(default_factory=list)
    env_steps: int = 0
    updates: int = 0


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


# ids for routers added during training; far from anything a topology file uses
_FRESH_IDS = (100_000, 200_000)


def perturbation(topology: Topology, seed: int, episode: int, prob: float) -> list[TopologyEvent]:
    """Random topology change for one training episode (possibly none).

    Either a router with a never-seen id joins two random routers, or a random
    link fails. Drawn from its own stream so rollouts are unaffected.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, episode, 0x50455254]))
    if prob <= 0 or rng.random() >= prob:
        return []
    routers = topology.routers
    if rng.random() < 0.5 or not topology.links:
        new = int(rng.integers(*_FRESH_IDS))
        ends = rng.choice(len(routers), size=min(2, len(routers)), replace=False)
        links = tuple(Link(new, routers[int(k)]) for k in sorted(ends))
        return [TopologyEvent(0, RouterAddition(new, links))]
    keys = sorted(topology.links)
    return [TopologyEvent(0, LinkFailure(keys[int(rng.integers(len(keys)))]))]


class _Pending:
    """Decisions waiting for their hop results (links longer than one step)."""

    def __init__(self):
        self.items: dict[int, list] = {}

    def open(self, step: int, snap: Snapshot, actions: dict):
        self.items[step] = [snap, None, dict(actions), {}]

    def record(self, outcome, step: int, next_snap: Snapshot):
        entry = self.items[step]
        entry[1] = next_snap
        for r in outcome.deferred:
            entry[2].pop(r, None)
        for h in outcome.hops:
            e = self.items.get(h.forwarded_at)
            if e is not None and h.router in e[2]:
                e[3][h.router] = (h.next_hop, h.reward, h.done)

    def ready(self, now: int, horizon: int):
        out = []
        for step in sorted(self.items):
            snap, nxt, acts, hops = self.items[step]
            if len(hops) >= len(acts) or now - step > horizon:
                del self.items[step]
                tr = make_transition(snap, nxt, hops)
                if tr is not None:
                    out.append(tr)
        return out


def train_run(
    topology: Topology,
    traffic: TrafficSpec,
    agent_config: AgentConfig | None = None,
    config: TrainConfig | None = None,
    seed: int = 0,
    events: list[TopologyEvent] = (),
    sim_config: SimConfig | None = None,
    store: nn.ParamStore | None = None,
    log=None,
) -> TrainResult:
    agent_config = agent_config or AgentConfig()
    config = config or TrainConfig()
    rng = np.random.default_rng(seed)
    store = store if store is not None else init_params(agent_config, seed)
    target = store.copy()
    buffer = ReplayBuffer(config.buffer_capacity)
    result = TrainResult(store, target)
    lambdas = config.lambdas or (traffic.lam,)
    for ep in range(config.episodes):
        lam = lambdas[ep % len(lambdas)]
        ep_events = list(events) + perturbation(topology, seed, ep, config.perturb_prob)
        sim = Simulator(topology, traffic.with_lambda(lam), episode_seed(seed, ep), ep_events, sim_config)
        pending = _Pending()
        td_sum = ec_sum = 0.0
        n_upd = 0
        eps = config.epsilon(result.env_steps)
        snap = sim.snapshot()
        for t in range(config.steps_per_episode):
            eps = config.epsilon(result.env_steps)
            actions = act_all(store, snap, agent_config, eps, rng)
            pending.open(t, snap, actions)
            outcome = sim.step(actions)
            nxt = sim.snapshot()
            pending.record(outcome, t, nxt)
            horizon = max((link.length for link in sim.topology.links.values()), default=1) + 1
            for tr in pending.ready(t, horizon):
                buffer.push(tr)
            snap = nxt
            result.env_steps += 1
            if result.env_steps % config.train_interval == 0:
                losses = train_step(store, target, buffer, agent_config, config, rng)
                if losses is not None:
                    td_sum += losses.td
                    ec_sum += losses.ec
                    n_upd += 1
        for tr in pending.ready(config.steps_per_episode, -1):
            buffer.push(tr)
        result.updates += n_upd
        m = sim.metrics()
        row = {
            "episode": ep,
            "env_steps": result.env_steps,
            "epsilon": eps,
            "lambda": lam,
            "delivery_rate": m.delivery_rate,
            "avg_latency_ms": m.avg_latency_ms if m.avg_latency_ms is not None else math.nan,
            "td_loss": td_sum / n_upd if n_upd else math.nan,
            "ec_loss": ec_sum / n_upd if n_upd else math.nan,
        }
        result.curve.append(row)
        if log is not None:
            log(row)
    return result
