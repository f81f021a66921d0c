"""Reference routing policies: shortest path first, backpressure and
tabular Q-routing. All of them speak the same policy protocol as the
learned agent::

    actions = policy.decide(sim)           # {router: next hop}
    outcome = sim.step(actions)
    policy.observe(sim, outcome)           # learning hook, may be a no-op
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .topo import RouterId, Topology, costs_to


@lru_cache(maxsize=512)
def _spf_table(topology: Topology, dst: RouterId) -> tuple[np.ndarray, dict[RouterId, RouterId]]:
    """Link-length distances to ``dst`` and the SPF next hop for every router."""
    dist = costs_to(topology, dst)
    idx = topology.index
    nxt = {}
    for r in topology.routers:
        if r == dst:
            continue
        best, best_cost = None, math.inf
        for j in topology.neighbors(r):
            c = topology.link(r, j).length + dist[idx[j]]
            if c < best_cost:  # ascending neighbour order -> lowest id wins ties
                best, best_cost = j, c
        if best is not None:
            nxt[r] = best
    return dist, nxt


def spf_distance(topology: Topology, r: RouterId, dst: RouterId) -> float:
    if dst not in topology:
        return math.inf
    dist, _ = _spf_table(topology, dst)
    return float(dist[topology.index[r]])


def spf_decide(topology: Topology, i: RouterId, packet_dst: RouterId) -> RouterId | None:
    """Next hop on a minimum-length path, or None when ``packet_dst`` is unreachable."""
    if packet_dst not in topology:
        return None
    _, nxt = _spf_table(topology, packet_dst)
    return nxt.get(i)


def bp_decide(sim, i: RouterId, packet_dst: RouterId) -> RouterId | None:
    topo = sim.topology
    own = sum(1 for p in sim.queues[i] if p.dst == packet_dst)
    best_key, best = None, None
    for j in topo.neighbors(i):
        theirs = 0 if j == packet_dst else sum(1 for p in sim.queues[j] if p.dst == packet_dst)
        diff = own - theirs
        d = topo.link(i, j).length + spf_distance(topo, j, packet_dst)
        key = (-diff, d, j)
        if best_key is None or key < best_key:
            best_key, best = key, j
    if best is None or -best_key[0] <= 0 or not math.isfinite(best_key[1]):
        return spf_decide(topo, i, packet_dst)
    return best


class SPFPolicy:
    name = "spf"

    def decide(self, sim) -> dict[RouterId, RouterId]:
        out = {}
        for r in sim.acting_routers():
            j = spf_decide(sim.topology, r, sim.queues[r][0].dst)
            if j is not None:
                out[r] = j
        return out

    def observe(self, sim, outcome) -> None:
        pass


class BackpressurePolicy(SPFPolicy):
    name = "bp"

    def decide(self, sim) -> dict[RouterId, RouterId]:
        out = {}
        for r in sim.acting_routers():
            j = bp_decide(sim, r, sim.queues[r][0].dst)
            if j is not None:
                out[r] = j
        return out


class QTable:
    """Estimated delivery time (steps) keyed by (router, destination, neighbour)."""

    def __init__(self, alpha: float = 0.1):
        self.alpha = alpha
        self.values: dict[tuple[RouterId, RouterId, RouterId], float] = {}

    def ensure(self, topology: Topology, i: RouterId, dst: RouterId) -> None:
        # hop-count initialisation, lazily for routers or links seen for the first time
        for j in topology.neighbors(i):
            key = (i, dst, j)
            if key not in self.values:
                d = 0.0 if j == dst else spf_distance(topology, j, dst)
                est = topology.link(i, j).length + d
                self.values[key] = est if math.isfinite(est) else 1e3

    def estimates(self, topology: Topology, i: RouterId, dst: RouterId) -> dict[RouterId, float]:
        self.ensure(topology, i, dst)
        return {j: self.values[(i, dst, j)] for j in topology.neighbors(i)}

    def min_estimate(self, topology: Topology, j: RouterId, dst: RouterId) -> float:
        if j == dst:
            return 0.0
        est = self.estimates(topology, j, dst)
        return min(est.values()) if est else 1e3

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "values": [[*k, v] for k, v in sorted(self.values.items())]}

    @classmethod
    def from_dict(cls, doc: dict) -> "QTable":
        t = cls(doc["alpha"])
        t.values = {(int(a), int(b), int(c)): float(v) for a, b, c, v in doc["values"]}
        return t


def qrouting_decide(q_estimates: dict[RouterId, float], epsilon: float, rng) -> RouterId:
    if not q_estimates:
        raise ValueError("no neighbours to choose from")
    nbrs = sorted(q_estimates)
    if epsilon > 0 and rng.random() < epsilon:
        return nbrs[int(rng.integers(len(nbrs)))]
    return min(nbrs, key=lambda j: (q_estimates[j], j))


def qrouting_update(
    table: QTable,
    i: RouterId,
    j: RouterId,
    packet_dst: RouterId,
    q_wait: float,
    s_transit: float,
    next_min: float,
) -> QTable:
    key = (i, packet_dst, j)
    if key not in table.values:
        raise KeyError(f"no Q entry for {key}")
    old = table.values[key]
    table.values[key] = old + table.alpha * (q_wait + s_transit + next_min - old)
    return table


class QRoutingPolicy:
    name = "qrouting"

    def __init__(self, table: QTable | None = None, epsilon: float = 0.0, seed: int = 0, learn: bool = True):
        self.table = table or QTable()
        self.epsilon = epsilon
        self.rng = np.random.default_rng(seed)
        self.learn = learn

    def decide(self, sim) -> dict[RouterId, RouterId]:
        out = {}
        topo = sim.topology
        for r in sim.acting_routers():
            est = self.table.estimates(topo, r, sim.queues[r][0].dst)
            out[r] = qrouting_decide(est, self.epsilon, self.rng)
        return out

    def observe(self, sim, outcome) -> None:
        if not self.learn:
            return
        topo = sim.topology
        for h in outcome.hops:
            if h.lost or h.router not in topo or (h.router, h.dst, h.next_hop) not in self.table.values:
                continue
            nxt = 0.0 if h.next_hop == h.dst or h.next_hop not in topo else self.table.min_estimate(topo, h.next_hop, h.dst)
            qrouting_update(self.table, h.router, h.next_hop, h.dst, h.waited, h.t_l, nxt)
