"""Network graph, topology events, the topology file format and the
queue-weighted shortest path used by the EC loss and the baselines.

Topology file format (``.topo``, line based, ``#`` starts a comment)::

    [routers]
    0-9                 # inclusive range, or explicit ids: 0 1 2 ...
    [links]
    1 5                 # u v [length [bandwidth]], defaults 1 1
    5 8 2 1
    [traffic]
    sources: 0 1 2 3 4
    destinations: 8 9
    lambda: 2
    [events]
    100 fail_link 1 5
    200 fail_router 6
    0 add_router 10 0 9     # neighbours as v, v:length or v:length:bandwidth

Sections may appear in any order; ``events`` is optional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Union

import numpy as np

from . import kernels

RouterId = int


class TopologyError(ValueError):
    """Invalid topology or event (duplicate link, dangling reference, ...)."""


class TopologyFormatError(TopologyError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Link:
    u: RouterId
    v: RouterId
    length: int = 1
    bandwidth: int = 1

    def __post_init__(self):
        if self.u == self.v:
            raise TopologyError(f"self-loop on router {self.u}")
        if self.u > self.v:
            u, v = self.v, self.u
            object.__setattr__(self, "u", u)
            object.__setattr__(self, "v", v)
        if self.length < 1:
            raise TopologyError(f"link {self.key}: nonpositive length {self.length}")
        if self.bandwidth < 1:
            raise TopologyError(f"link {self.key}: nonpositive bandwidth {self.bandwidth}")

    @property
    def key(self) -> tuple[int, int]:
        return (self.u, self.v)


def link_key(a: RouterId, b: RouterId) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class LinkFailure:
    pair: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "pair", link_key(*self.pair))


@dataclass(frozen=True)
class RouterFailure:
    router: RouterId


@dataclass(frozen=True)
class RouterAddition:
    router: RouterId
    links: tuple[Link, ...]


Change = Union[LinkFailure, RouterFailure, RouterAddition]


@dataclass(frozen=True)
class TopologyEvent:
    at_step: int
    change: Change


@dataclass(frozen=True)
class TrafficSpec:
    sources: tuple[RouterId, ...]
    destinations: tuple[RouterId, ...]
    lam: float

    def __post_init__(self):
        if not self.lam > 0 or not math.isfinite(self.lam):
            raise TopologyError(f"traffic lambda must be positive, got {self.lam}")
        if not self.sources or not self.destinations:
            raise TopologyError("traffic needs at least one source and one destination")

    def with_lambda(self, lam: float) -> "TrafficSpec":
        return TrafficSpec(self.sources, self.destinations, float(lam))


class Topology:
    """Undirected router graph. Treat as immutable; ``apply`` returns a new version."""

    def __init__(
        self,
        routers: Iterable[RouterId],
        links: Iterable[Link] = (),
        retired: Iterable[RouterId] = (),
        version: int = 0,
    ):
        routers = list(routers)
        self.routers: tuple[RouterId, ...] = tuple(sorted(set(routers)))
        if len(self.routers) != len(routers):
            raise TopologyError("duplicate router id")
        self.retired = frozenset(retired)
        self.version = version
        self.links: dict[tuple[int, int], Link] = {}
        members = set(self.routers)
        adj: dict[RouterId, list[RouterId]] = {r: [] for r in self.routers}
        for link in links:
            if link.key in self.links:
                raise TopologyError(f"duplicate link {link.key}")
            for end in link.key:
                if end not in members:
                    raise TopologyError(f"link {link.key} references unknown router {end}")
            self.links[link.key] = link
            adj[link.u].append(link.v)
            adj[link.v].append(link.u)
        self._adj = {r: tuple(sorted(ns)) for r, ns in adj.items()}

    def __repr__(self):
        return f"Topology(N={len(self.routers)}, links={len(self.links)}, version={self.version})"

    def __contains__(self, router) -> bool:
        return router in self._adj

    def neighbors(self, i: RouterId) -> tuple[RouterId, ...]:
        try:
            return self._adj[i]
        except KeyError:
            raise KeyError(f"unknown router {i}") from None

    def degree(self, i: RouterId) -> int:
        return len(self.neighbors(i))

    def link(self, a: RouterId, b: RouterId) -> Link:
        try:
            return self.links[link_key(a, b)]
        except KeyError:
            raise KeyError(f"no link between {a} and {b}") from None

    def has_link(self, a: RouterId, b: RouterId) -> bool:
        return link_key(a, b) in self.links

    def apply(self, change: Change) -> "Topology":
        links = dict(self.links)
        routers = list(self.routers)
        retired = set(self.retired)
        if isinstance(change, LinkFailure):
            if change.pair not in links:
                raise TopologyError(f"cannot fail missing link {change.pair}")
            del links[change.pair]
        elif isinstance(change, RouterFailure):
            r = change.router
            if r not in self:
                raise TopologyError(f"cannot fail missing router {r}")
            routers.remove(r)
            retired.add(r)
            links = {k: l for k, l in links.items() if r not in k}
        elif isinstance(change, RouterAddition):
            r = change.router
            if r in self or r in self.retired:
                raise TopologyError(f"router id {r} already used in this run")
            routers.append(r)
            for link in change.links:
                if r not in link.key:
                    raise TopologyError(f"added link {link.key} does not touch new router {r}")
                if link.key in links:
                    raise TopologyError(f"duplicate link {link.key}")
                links[link.key] = link
        else:
            raise TypeError(f"unknown topology change {change!r}")
        return Topology(routers, links.values(), retired, self.version + 1)

    # dense (CSR) view for the kernels; index order = ascending router id

    @cached_property
    def index(self) -> dict[RouterId, int]:
        return {r: k for k, r in enumerate(self.routers)}

    @cached_property
    def csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        indptr = np.zeros(len(self.routers) + 1, dtype=np.int64)
        indices, lengths = [], []
        for k, r in enumerate(self.routers):
            ns = self._adj[r]
            indptr[k + 1] = indptr[k] + len(ns)
            indices.extend(self.index[n] for n in ns)
            lengths.extend(self.links[link_key(r, n)].length for n in ns)
        return indptr, np.asarray(indices, dtype=np.int64), np.asarray(lengths, dtype=np.float64)


def apply_event(topology: Topology, event: Union[TopologyEvent, Change]) -> Topology:
    change = event.change if isinstance(event, TopologyEvent) else event
    return topology.apply(change)


def neighbors(topology: Topology, i: RouterId) -> list[RouterId]:
    return list(topology.neighbors(i))


def costs_to(topology: Topology, z: RouterId, queue_lengths: Mapping[RouterId, int] | np.ndarray | None = None) -> np.ndarray:
    """Queue-weighted cost from every router (dense index order) to ``z``."""
    indptr, indices, lengths = topology.csr
    if queue_lengths is None:
        node_cost = np.zeros(len(topology.routers))
    elif isinstance(queue_lengths, np.ndarray):
        node_cost = queue_lengths.astype(np.float64)
    else:
        node_cost = np.array([float(queue_lengths.get(r, 0)) for r in topology.routers])
    return kernels.cost_to_target(indptr, indices, lengths, node_cost, np.int64(topology.index[z]))


def weighted_shortest_path(
    topology: Topology,
    i: RouterId,
    j: RouterId,
    z: RouterId,
    queue_lengths: Mapping[RouterId, int] | None = None,
) -> float | None:
    """Cost of sending via neighbour ``j`` then the cheapest path to ``z``.

    Each hop u->v costs link length plus the queue at v; the destination's
    queue is not charged. Returns None when ``z`` is unreachable from ``j``.
    """
    if not topology.has_link(i, j):
        raise TopologyError(f"{j} is not a neighbour of {i}")
    if z not in topology:
        raise TopologyError(f"unknown destination {z}")
    q = queue_lengths or {}
    dist = costs_to(topology, z, q)[topology.index[j]]
    if not math.isfinite(dist):
        return None
    enter = 0.0 if j == z else float(q.get(j, 0))
    return topology.link(i, j).length + enter + float(dist)


# --------------------------------------------------------------------- file I/O


@dataclass
class TopologyFile:
    topology: Topology
    traffic: TrafficSpec
    events: list[TopologyEvent] = field(default_factory=list)

    def __iter__(self):
        return iter((self.topology, self.traffic, self.events))


_SECTIONS = ("routers", "links", "traffic", "events")


def _int(tok: str, line: int, col: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise TopologyFormatError(f"expected integer, got {tok!r}", line, col) from None


def _tokens(raw: str):
    """Yield (column, token) pairs, columns 1-based."""
    col = 0
    for tok in raw.split():
        col = raw.index(tok, col)
        yield col + 1, tok
        col += len(tok)


def _neighbor_spec(new: int, tok: str, line: int, col: int) -> Link:
    parts = tok.split(":")
    if not 1 <= len(parts) <= 3:
        raise TopologyFormatError(f"bad neighbour spec {tok!r}", line, col)
    nums = [_int(p, line, col) for p in parts]
    try:
        return Link(new, *nums)
    except TopologyError as exc:
        raise TopologyFormatError(str(exc), line, col) from None


def load_topology(text: str) -> TopologyFile:
    """Parse and validate a topology file."""
    section = None
    seen: set[str] = set()
    routers: list[int] = []
    links: list[Link] = []
    traffic: dict[str, tuple[int, int, str]] = {}
    events: list[TopologyEvent] = []
    for lineno, full in enumerate(text.splitlines(), start=1):
        raw = full.split("#", 1)[0].rstrip()
        if not raw.strip():
            continue
        stripped = raw.strip()
        if stripped.startswith("["):
            name = stripped.strip("[]").strip().lower()
            if not stripped.endswith("]") or name not in _SECTIONS:
                raise TopologyFormatError(f"unknown section header {stripped!r}", lineno, raw.index("[") + 1)
            if name in seen:
                raise TopologyFormatError(f"section [{name}] repeated", lineno)
            seen.add(name)
            section = name
            continue
        toks = list(_tokens(raw))
        if section is None:
            raise TopologyFormatError("content before first section header", lineno, toks[0][0])
        if section == "routers":
            for col, tok in toks:
                if "-" in tok:
                    lo, _, hi = tok.partition("-")
                    a, b = _int(lo, lineno, col), _int(hi, lineno, col)
                    if b < a:
                        raise TopologyFormatError(f"empty range {tok!r}", lineno, col)
                    routers.extend(range(a, b + 1))
                else:
                    r = _int(tok, lineno, col)
                    if r < 0:
                        raise TopologyFormatError("router ids must be non-negative", lineno, col)
                    routers.append(r)
        elif section == "links":
            if not 2 <= len(toks) <= 4:
                raise TopologyFormatError("link needs: u v [length [bandwidth]]", lineno, toks[0][0])
            nums = [_int(tok, lineno, col) for col, tok in toks]
            try:
                links.append(Link(*nums))
            except TopologyError as exc:
                raise TopologyFormatError(str(exc), lineno, toks[0][0]) from None
        elif section == "traffic":
            key, sep, rest = stripped.partition(":")
            if not sep:
                key, _, rest = stripped.partition("=")
            key = key.strip().lower()
            if key in ("lam",):
                key = "lambda"
            if key not in ("sources", "destinations", "lambda"):
                raise TopologyFormatError(f"unknown traffic key {key!r}", lineno, toks[0][0])
            traffic[key] = (lineno, raw.index(rest.strip()) + 1 if rest.strip() else 1, rest.strip())
        elif section == "events":
            if len(toks) < 3:
                raise TopologyFormatError("event needs: step kind args...", lineno, toks[0][0])
            step = _int(toks[0][1], lineno, toks[0][0])
            if step < 0:
                raise TopologyFormatError("event step must be non-negative", lineno, toks[0][0])
            kind_col, kind = toks[1]
            args = toks[2:]
            if kind == "fail_link":
                if len(args) != 2:
                    raise TopologyFormatError("fail_link takes two router ids", lineno, kind_col)
                change = LinkFailure((_int(args[0][1], lineno, args[0][0]), _int(args[1][1], lineno, args[1][0])))
            elif kind == "fail_router":
                if len(args) != 1:
                    raise TopologyFormatError("fail_router takes one router id", lineno, kind_col)
                change = RouterFailure(_int(args[0][1], lineno, args[0][0]))
            elif kind == "add_router":
                new = _int(args[0][1], lineno, args[0][0])
                change = RouterAddition(new, tuple(_neighbor_spec(new, t, lineno, c) for c, t in args[1:]))
            else:
                raise TopologyFormatError(f"unknown event kind {kind!r}", lineno, kind_col)
            events.append(TopologyEvent(step, change))

    for name in ("routers", "traffic"):
        if name not in seen:
            raise TopologyFormatError(f"missing [{name}] section", lineno if text else 1)
    if len(set(routers)) != len(routers):
        raise TopologyError("duplicate router id in [routers]")
    topology = Topology(routers, links)

    parsed = {}
    for key in ("sources", "destinations", "lambda"):
        if key not in traffic:
            raise TopologyError(f"[traffic] is missing {key!r}")
        line, col, value = traffic[key]
        if key == "lambda":
            try:
                parsed[key] = float(value)
            except ValueError:
                raise TopologyFormatError(f"bad lambda {value!r}", line, col) from None
        else:
            ids = [_int(t, line, col + c - 1) for c, t in _tokens(value)]
            for r in ids:
                if r not in topology:
                    raise TopologyError(f"traffic {key} references unknown router {r}")
            parsed[key] = tuple(sorted(set(ids)))
    spec = TrafficSpec(parsed["sources"], parsed["destinations"], parsed["lambda"])

    events.sort(key=lambda e: e.at_step)
    check = topology
    for ev in events:
        try:
            check = check.apply(ev.change)
        except TopologyError as exc:
            raise TopologyError(f"event at step {ev.at_step}: {exc}") from None
    return TopologyFile(topology, spec, events)


def read_topology(path) -> TopologyFile:
    return load_topology(Path(path).read_text())


def _fmt_link(link: Link) -> str:
    return f"{link.u} {link.v} {link.length} {link.bandwidth}"


def dump_topology(topology: Topology, traffic: TrafficSpec, events: Iterable[TopologyEvent] = ()) -> str:
    lines = ["[routers]", " ".join(str(r) for r in topology.routers), "", "[links]"]
    lines += [_fmt_link(l) for _, l in sorted(topology.links.items())]
    lines += [
        "",
        "[traffic]",
        "sources: " + " ".join(map(str, traffic.sources)),
        "destinations: " + " ".join(map(str, traffic.destinations)),
        f"lambda: {traffic.lam!r}",
    ]
    events = list(events)
    if events:
        lines += ["", "[events]"]
        for ev in events:
            c = ev.change
            if isinstance(c, LinkFailure):
                lines.append(f"{ev.at_step} fail_link {c.pair[0]} {c.pair[1]}")
            elif isinstance(c, RouterFailure):
                lines.append(f"{ev.at_step} fail_router {c.router}")
            else:
                specs = []
                for l in c.links:
                    other = l.v if l.u == c.router else l.u
                    specs.append(f"{other}:{l.length}:{l.bandwidth}")
                lines.append(f"{ev.at_step} add_router {c.router} " + " ".join(specs))
    return "\n".join(lines) + "\n"


def data_path(name: str) -> Path:
    """Path of a topology file shipped with the package."""
    return Path(__file__).parent / "data" / name


DEFAULT_TOPOLOGY = "default10.topo"
ATT_TOPOLOGY = "att_like.topo"
