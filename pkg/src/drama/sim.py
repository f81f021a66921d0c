"""Discrete-time packet-level routing simulator.

One call to :meth:`Simulator.step` runs the fixed phase order

1. apply topology events due at this step
2. generate Poisson traffic
3. forward the head packet of every acting router (bandwidth permitting)
4. advance in-flight packets; deliver, enqueue or drop on arrival
5. score completed hops
6. advance the clock

Time ``t`` means "the start of step t". A packet forwarded during step t
over a link of length L arrives at time ``t + L``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .topo import (
    RouterAddition,
    RouterFailure,
    RouterId,
    Topology,
    TopologyEvent,
    TrafficSpec,
    link_key,
)

STEP_MS = 1.0


@dataclass(frozen=True)
class ObsConfig:
    id_dim: int = 8
    history: int = 8
    queue_slots: int = 10
    capacity_scale: float = 50.0
    degree_scale: float = 16.0

    @property
    def dim(self) -> int:
        return self.id_dim * (1 + self.history + self.queue_slots) + 3


@dataclass(frozen=True)
class SimConfig:
    capacity: int = 50
    r_lost: float = 100.0
    tau_l: float = 1.0
    tau_q: float = 1.0
    service_rate: int = 1
    obs: ObsConfig = ObsConfig()


# ------------------------------------------------------------ identity codes

_ID_SALT = 0x44524D41
_id_cache: dict[int, np.ndarray] = {}


def id_vector(router: RouterId, dim: int = 8) -> np.ndarray:
    """Fixed pseudo-random code for a router id (zero mean, unit variance)."""
    key = (router, dim)
    vec = _id_cache.get(key)
    if vec is None:
        raw = np.random.default_rng(np.random.SeedSequence([_ID_SALT, int(router), dim])).standard_normal(dim)
        vec = (raw - raw.mean()) / raw.std()
        vec.setflags(write=False)
        _id_cache[key] = vec
    return vec


class _IdTable:
    """Dense lookup table; row -1 is all zeros so padded codes index it."""

    def __init__(self, dim: int):
        self.dim = dim
        self.table = np.zeros((1, dim))

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        top = int(codes.max(initial=-1))
        if top >= self.table.shape[0] - 1:
            n = max(top + 1, 2 * (self.table.shape[0] - 1), 16)
            self.table = np.vstack([np.stack([id_vector(r, self.dim) for r in range(n)]), np.zeros((1, self.dim))])
        return self.table[codes]


_tables: dict[int, _IdTable] = {}


def id_lookup(codes: np.ndarray, dim: int = 8) -> np.ndarray:
    table = _tables.get(dim)
    if table is None:
        table = _tables[dim] = _IdTable(dim)
    return table.lookup(codes)


# ------------------------------------------------------------ domain types


@dataclass(eq=False)
class Packet:
    pid: int
    src: RouterId
    dst: RouterId
    created_at: int
    delivered_at: int | None = None
    lost_at: int | None = None
    hops: int = 0
    enqueued_at: int = 0
    first_forward_at: int | None = None

    @property
    def latency(self) -> int | None:
        return None if self.delivered_at is None else self.delivered_at - self.created_at


@dataclass
class InFlight:
    packet: Packet
    frm: RouterId
    to: RouterId
    remaining: int
    forwarded_at: int
    length: int
    waited: int = 0


@dataclass
class Observation:
    o_id: np.ndarray
    o_h: np.ndarray
    o_q: np.ndarray
    o_d: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.o_id, self.o_h, self.o_q, self.o_d])


@dataclass
class HopResult:
    """Outcome of one forwarding decision, reported when the packet lands."""

    router: RouterId
    next_hop: RouterId
    pid: int
    dst: RouterId
    forwarded_at: int
    t_l: int
    t_q: int
    waited: int
    lost: bool
    delivered: bool
    reward: float

    @property
    def done(self) -> bool:
        return self.lost or self.delivered


@dataclass
class StepOutcome:
    hops: list[HopResult] = field(default_factory=list)
    delivered: list[Packet] = field(default_factory=list)
    lost: list[Packet] = field(default_factory=list)
    deferred: list[RouterId] = field(default_factory=list)

    @property
    def rewards(self) -> dict[RouterId, float]:
        out: dict[RouterId, float] = {}
        for h in self.hops:
            out.setdefault(h.router, h.reward)
        return out

    @property
    def dones(self) -> dict[RouterId, int]:
        out: dict[RouterId, int] = {}
        for h in self.hops:
            out.setdefault(h.router, int(h.done))
        return out


@dataclass
class Metrics:
    delivery_rate: float
    avg_latency_ms: float | None
    latency_std: float | None
    generated: int
    delivered: int
    lost: int
    pending: int


@dataclass
class Snapshot:
    """Compact joint observation: everything needed to rebuild every o_i.

    ``codes`` holds router ids per row: own id, the last H next hops, then
    the first K queued destinations; -1 marks padding.
    """

    topology: Topology
    ids: np.ndarray
    codes: np.ndarray
    occupancy: np.ndarray
    capacity: float
    degree: np.ndarray
    queue_len: np.ndarray
    head_dst: np.ndarray
    obs: ObsConfig

    def encode(self) -> np.ndarray:
        return encode_snapshots([self])


def encode_snapshots(snaps: Sequence[Snapshot]) -> np.ndarray:
    """Observation matrix of several snapshots stacked row-wise."""
    cfg = snaps[0].obs if snaps else ObsConfig()
    n = sum(len(s.ids) for s in snaps)
    if n == 0:
        return np.zeros((0, cfg.dim))
    codes = np.concatenate([s.codes for s in snaps])
    vecs = id_lookup(codes, cfg.id_dim).reshape(n, -1)
    split = cfg.id_dim * (1 + cfg.history)
    out = np.empty((n, cfg.dim))
    out[:, :split] = vecs[:, :split]
    out[:, split] = np.concatenate([s.occupancy for s in snaps])
    out[:, split + 1] = np.concatenate([np.full(len(s.ids), s.capacity) for s in snaps])
    out[:, split + 2 : -1] = vecs[:, split:]
    out[:, -1] = np.concatenate([s.degree for s in snaps])
    return out


def compute_reward(t_l: float, t_q: float, lost: bool, r_lost=100.0, tau_l=1.0, tau_q=1.0) -> float:
    if lost:
        return -float(r_lost)
    return -(tau_q * t_q + tau_l * t_l)


# ------------------------------------------------------------ simulator


class Simulator:
    """Single-writer simulation state plus the step function."""

    def __init__(
        self,
        topology: Topology,
        traffic: TrafficSpec,
        seed: int,
        events: Sequence[TopologyEvent] = (),
        config: SimConfig | None = None,
        trace: list | None = None,
    ):
        self.config = config or SimConfig()
        self.topology = topology
        self.traffic = traffic
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.events = deque(sorted(events, key=lambda e: e.at_step))
        self.step_count = 0
        self.queues: dict[RouterId, deque[Packet]] = {r: deque() for r in topology.routers}
        self.history: dict[RouterId, deque[RouterId]] = {
            r: deque(maxlen=self.config.obs.history) for r in topology.routers
        }
        self.in_flight: list[InFlight] = []
        self.packets: list[Packet] = []
        self.generated = 0
        self.delivered = 0
        self.lost = 0
        self.latency_sum = 0
        self.trace = trace

    # ---------------------------------------------------------------- queries

    @property
    def active_routers(self) -> tuple[RouterId, ...]:
        return self.topology.routers

    def queue_lengths(self) -> dict[RouterId, int]:
        return {r: len(q) for r, q in self.queues.items()}

    def queued_count(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def acting_routers(self) -> list[RouterId]:
        return [r for r in self.topology.routers if self.queues[r] and self.topology.neighbors(r)]

    def head(self, r: RouterId) -> Packet | None:
        q = self.queues[r]
        return q[0] if q else None

    def conservation_ok(self) -> bool:
        return self.generated == self.delivered + self.lost + self.queued_count() + len(self.in_flight)

    # ------------------------------------------------------------ observation

    def observe(self, i: RouterId) -> Observation:
        if i not in self.topology:
            raise KeyError(f"router {i} is not active")
        cfg = self.config.obs
        hist = list(self.history[i])
        o_h = np.zeros(cfg.history * cfg.id_dim)
        for k, r in enumerate(hist):
            o_h[k * cfg.id_dim : (k + 1) * cfg.id_dim] = id_vector(r, cfg.id_dim)
        q = self.queues[i]
        dests = np.zeros(cfg.queue_slots * cfg.id_dim)
        for k, p in enumerate(list(q)[: cfg.queue_slots]):
            dests[k * cfg.id_dim : (k + 1) * cfg.id_dim] = id_vector(p.dst, cfg.id_dim)
        o_q = np.concatenate(
            [[len(q) / cfg.capacity_scale, self.config.capacity / cfg.capacity_scale], dests]
        )
        return Observation(
            o_id=id_vector(i, cfg.id_dim).copy(),
            o_h=o_h,
            o_q=o_q,
            o_d=np.array([self.topology.degree(i) / cfg.degree_scale]),
        )

    def snapshot(self) -> Snapshot:
        cfg = self.config.obs
        ids = np.asarray(self.topology.routers, dtype=np.int64)
        n = len(ids)
        codes = np.full((n, 1 + cfg.history + cfg.queue_slots), -1, dtype=np.int64)
        occupancy = np.empty(n)
        qlen = np.empty(n, dtype=np.int64)
        head = np.full(n, -1, dtype=np.int64)
        degree = np.empty(n)
        for k, r in enumerate(self.topology.routers):
            codes[k, 0] = r
            hist = self.history[r]
            if hist:
                codes[k, 1 : 1 + len(hist)] = list(hist)
            q = self.queues[r]
            qlen[k] = len(q)
            occupancy[k] = len(q) / cfg.capacity_scale
            if q:
                head[k] = q[0].dst
                top = [p.dst for _, p in zip(range(cfg.queue_slots), q)]
                codes[k, 1 + cfg.history : 1 + cfg.history + len(top)] = top
            degree[k] = len(self.topology.neighbors(r)) / cfg.degree_scale
        return Snapshot(
            topology=self.topology,
            ids=ids,
            codes=codes,
            occupancy=occupancy,
            capacity=self.config.capacity / cfg.capacity_scale,
            degree=degree,
            queue_len=qlen,
            head_dst=head,
            obs=cfg,
        )

    # ---------------------------------------------------------------- phases

    def _log(self, *fields):
        if self.trace is not None:
            self.trace.append(" ".join(str(f) for f in (self.step_count, *fields)))

    def _lose(self, p: Packet, when: int, outcome: StepOutcome, where: RouterId):
        p.lost_at = when
        self.lost += 1
        outcome.lost.append(p)
        self._log("loss", p.pid, where)

    def _deliver(self, p: Packet, when: int, outcome: StepOutcome):
        p.delivered_at = when
        self.delivered += 1
        self.latency_sum += when - p.created_at
        outcome.delivered.append(p)
        self._log("deliver", p.pid, p.dst)

    def _apply_events(self, outcome: StepOutcome):
        cfg = self.config
        while self.events and self.events[0].at_step <= self.step_count:
            ev = self.events.popleft()
            change = ev.change
            self.topology = self.topology.apply(change)
            self._log("event", type(change).__name__, change)
            if isinstance(change, RouterAddition):
                self.queues[change.router] = deque()
                self.history[change.router] = deque(maxlen=cfg.obs.history)
                continue
            if isinstance(change, RouterFailure):
                gone = change.router
                for p in self.queues.pop(gone):
                    self._lose(p, self.step_count, outcome, gone)
                del self.history[gone]
                cut = lambda f: gone in (f.frm, f.to)  # noqa: E731
            else:
                pair = change.pair
                cut = lambda f: link_key(f.frm, f.to) == pair  # noqa: E731
            keep = []
            for f in self.in_flight:
                if cut(f):
                    self._lose(f.packet, self.step_count, outcome, f.to)
                    if f.frm in self.topology:
                        outcome.hops.append(self._hop(f, 0, lost=True, delivered=False))
                else:
                    keep.append(f)
            self.in_flight = keep

    def generate_traffic(self, outcome: StepOutcome | None = None) -> int:
        outcome = outcome if outcome is not None else StepOutcome()
        spec = self.traffic
        sources = [r for r in spec.sources if r in self.topology]
        dests = [r for r in spec.destinations if r in self.topology]
        k = int(self.rng.poisson(spec.lam))
        if not sources or not dests:
            return 0
        cap = self.config.capacity
        for _ in range(k):
            src = sources[int(self.rng.integers(len(sources)))]
            dst = dests[int(self.rng.integers(len(dests)))]
            p = Packet(len(self.packets), src, dst, self.step_count, enqueued_at=self.step_count)
            self.packets.append(p)
            self.generated += 1
            self._log("generate", p.pid, src, dst)
            if src == dst:
                self._deliver(p, self.step_count, outcome)
            elif len(self.queues[src]) >= cap:
                self._lose(p, self.step_count, outcome, src)
            else:
                self.queues[src].append(p)
                self._log("enqueue", p.pid, src, len(self.queues[src]) - 1)
        return k

    def inject(self, src: RouterId, dst: RouterId) -> Packet:
        """Place one packet at the tail of ``src``'s queue (tests, scripted traffic)."""
        p = Packet(len(self.packets), src, dst, self.step_count, enqueued_at=self.step_count)
        self.packets.append(p)
        self.generated += 1
        if src == dst:
            self._deliver(p, self.step_count, StepOutcome())
        elif len(self.queues[src]) >= self.config.capacity:
            self._lose(p, self.step_count, StepOutcome(), src)
        else:
            self.queues[src].append(p)
        return p

    def _hop(self, f: InFlight, t_q: int, lost: bool, delivered: bool) -> HopResult:
        cfg = self.config
        return HopResult(
            router=f.frm,
            next_hop=f.to,
            pid=f.packet.pid,
            dst=f.packet.dst,
            forwarded_at=f.forwarded_at,
            t_l=f.length,
            t_q=t_q,
            waited=f.waited,
            lost=lost,
            delivered=delivered,
            reward=compute_reward(f.length, t_q, lost, cfg.r_lost, cfg.tau_l, cfg.tau_q),
        )

    def _forward(self, actions: Mapping[RouterId, RouterId], outcome: StepOutcome, version_before: int):
        used: dict[tuple[int, int], int] = {}
        for i in sorted(actions):
            j = actions[i]
            if i not in self.topology:
                continue  # failed this step
            if not self.topology.has_link(i, j):
                if self.topology.version != version_before:
                    # decided on the pre-event graph; the link vanished this step
                    outcome.deferred.append(i)
                    continue
                raise ValueError(f"router {i}: action {j} is not a neighbour at step {self.step_count}")
            link = self.topology.link(i, j)
            q = self.queues[i]
            for _ in range(self.config.service_rate):
                if not q:
                    break
                if used.get((i, j), 0) >= link.bandwidth:
                    outcome.deferred.append(i)
                    break
                used[(i, j)] = used.get((i, j), 0) + 1
                p = q.popleft()
                p.hops += 1
                if p.first_forward_at is None:
                    p.first_forward_at = self.step_count
                waited = self.step_count - p.enqueued_at
                self.in_flight.append(InFlight(p, i, j, link.length, self.step_count, link.length, waited))
                self.history[i].appendleft(j)
                self._log("forward", p.pid, i, j)

    def _advance(self, outcome: StepOutcome):
        now = self.step_count + 1
        cap = self.config.capacity
        still = []
        for f in self.in_flight:
            f.remaining -= 1
            if f.remaining > 0:
                still.append(f)
                continue
            p = f.packet
            if f.to not in self.topology:
                self._lose(p, now, outcome, f.to)
                outcome.hops.append(self._hop(f, 0, lost=True, delivered=False))
            elif f.to == p.dst:
                self._deliver(p, now, outcome)
                outcome.hops.append(self._hop(f, 0, lost=False, delivered=True))
            else:
                q = self.queues[f.to]
                if len(q) >= cap:
                    self._lose(p, now, outcome, f.to)
                    outcome.hops.append(self._hop(f, 0, lost=True, delivered=False))
                else:
                    t_q = len(q)
                    p.enqueued_at = now
                    q.append(p)
                    self._log("enqueue", p.pid, f.to, t_q)
                    outcome.hops.append(self._hop(f, t_q, lost=False, delivered=False))
        self.in_flight = still

    def step(self, actions: Mapping[RouterId, RouterId]) -> StepOutcome:
        outcome = StepOutcome()
        version = self.topology.version
        self._apply_events(outcome)
        self.generate_traffic(outcome)
        self._forward(actions, outcome, version)
        self._advance(outcome)
        self.step_count += 1
        return outcome

    # ---------------------------------------------------------------- metrics

    def metrics(self, window: tuple[int, int] | None = None) -> Metrics:
        return metrics(self, window)


def reset(
    topology: Topology,
    traffic: TrafficSpec,
    seed: int,
    events: Sequence[TopologyEvent] = (),
    config: SimConfig | None = None,
    trace: list | None = None,
) -> Simulator:
    return Simulator(topology, traffic, seed, events, config, trace)


def observe(state: Simulator, i: RouterId) -> Observation:
    return state.observe(i)


def step(state: Simulator, actions: Mapping[RouterId, RouterId]):
    outcome = state.step(actions)
    observations = {r: state.observe(r) for r in state.active_routers}
    return state, outcome, observations


def metrics(state: Simulator, window: tuple[int, int] | None = None) -> Metrics:
    lo, hi = window if window is not None else (0, state.step_count)
    if not 0 <= lo <= hi:
        raise ValueError(f"bad metrics window {window}")
    lat, lost, gen = [], 0, 0
    for p in state.packets:
        if lo <= p.created_at < hi:
            gen += 1
            if p.delivered_at is not None:
                lat.append(p.delivered_at - p.created_at)
            elif p.lost_at is not None:
                lost += 1
    done = len(lat) + lost
    rate = 1.0 if done == 0 else len(lat) / done
    if lat:
        arr = np.asarray(lat, dtype=np.float64) * STEP_MS
        avg, std = float(arr.mean()), float(arr.std())
    else:
        avg = std = None
    return Metrics(rate, avg, std, gen, len(lat), lost, gen - done)
