"""Scenario runner, metrics files and checkpoint management.

Evaluation protocol: every cell (policy x variant x lambda) runs one
simulation of ``steps`` steps per seed, and the simulator is seeded with
the seed itself. Training episodes derive their seeds through a
SeedSequence, so evaluation traffic is never seen during training.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import nn
from .nn import checkpoint
from .agent import AgentConfig, DramaPolicy, init_params, overhead_bits
from .baselines import BackpressurePolicy, QRoutingPolicy, SPFPolicy
from .sim import SimConfig, Simulator
from .topo import (
    DEFAULT_TOPOLOGY,
    Link,
    LinkFailure,
    RouterAddition,
    RouterFailure,
    Topology,
    TopologyEvent,
    TopologyFile,
    TrafficSpec,
    data_path,
    read_topology,
)
from .train import TrainConfig, TrainResult, train_run

POLICIES = ("drama", "drama_minus", "spf", "bp", "qrouting")
SCENARIOS = (
    "load_sweep",
    "ablation",
    "comm_rounds",
    "overhead",
    "link_failure",
    "node_failure",
    "node_addition",
    "custom",
)
LEARNED = ("drama", "drama_minus")

# (quantize_bits, message_interval) pairs of the overhead table
OVERHEAD_VARIANTS = ((0, 1), (1, 1), (0, 10), (1, 10))


class HarnessError(RuntimeError):
    pass


# ------------------------------------------------------------------ models and checkpoints


@dataclass
class Model:
    """A trained parameter store plus the agent config it was built for."""

    store: nn.ParamStore
    config: AgentConfig
    train_config: TrainConfig | None = None
    label: str = "drama"

    def variant(self, **changes) -> "Model":
        return Model(self.store, dataclasses.replace(self.config, **changes), self.train_config, self.label)


def save_model(path, model: Model, extra: dict | None = None) -> Path:
    cfg = {"agent": model.config.to_dict(), "label": model.label}
    if model.train_config is not None:
        cfg["train"] = model.train_config.to_dict()
    return checkpoint.save(path, model.store, cfg, extra)


def load_model(path, expect: AgentConfig | None = None) -> Model:
    """Load a checkpoint; ``expect`` checks parameter shapes against a config."""
    path = Path(path)
    if not path.exists():
        raise HarnessError(f"checkpoint not found: {path}")
    store, doc = checkpoint.load(path)
    cfg = AgentConfig.from_dict(doc["config"]["agent"])
    checkpoint.check_compatible(store, init_params(expect or cfg))
    train = doc["config"].get("train")
    return Model(store, cfg, TrainConfig.from_dict(train) if train else None, doc["config"].get("label", "drama"))


def checkpoint_io(mode: str, path, model: Model | None = None, expect: AgentConfig | None = None) -> Model:
    if mode == "save":
        if model is None:
            raise ValueError("save needs a model")
        save_model(path, model)
        return model
    if mode == "load":
        return load_model(path, expect)
    raise ValueError(f"mode must be 'save' or 'load', not {mode!r}")


# ------------------------------------------------------------------ records


@dataclass
class RunRecord:
    scenario: str
    seed: int
    policy: str
    lam: float
    variant: str
    delivery_rate: float
    avg_latency_ms: float | None
    latency_std: float | None
    overhead_bits: float | None
    generated: int
    delivered: int
    lost: int
    wall_time: float = field(default=0.0, compare=False)


COLUMNS = [f.name for f in dataclasses.fields(RunRecord)]
_INT = {"seed", "generated", "delivered", "lost"}
_STR = {"scenario", "policy", "variant"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def export_metrics(records: Sequence[RunRecord], path) -> Path:
    """Write records as CSV and an aggregate ``<stem>_summary.csv`` beside it."""
    if not records:
        raise ValueError("no records to export")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for r in records:
                w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
        summary = path.with_name(path.stem + "_summary.csv")
        with summary.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "policy", "variant", "lam", "n", "delivery_mean", "delivery_std", "latency_mean", "latency_std", "overhead_bits"])
            for row in aggregate(records):
                w.writerow([_fmt(row[k]) for k in ("scenario", "policy", "variant", "lam", "n", "delivery_mean", "delivery_std", "latency_mean", "latency_std", "overhead_bits")])
    except OSError as exc:
        raise HarnessError(f"cannot write metrics to {path}: {exc}") from None
    return path


def read_metrics(path) -> list[RunRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {}
            for c in COLUMNS:
                raw = row[c]
                if c in _STR:
                    vals[c] = raw
                elif c in _INT:
                    vals[c] = int(raw)
                else:
                    vals[c] = None if raw == "" else float(raw)
            out.append(RunRecord(**vals))
    return out


def _mean_std(xs: list[float]) -> tuple[float | None, float | None]:
    if not xs:
        return None, None
    return statistics.fmean(xs), statistics.stdev(xs) if len(xs) > 1 else 0.0


def aggregate(records: Iterable[RunRecord]) -> list[dict]:
    """Mean and sample std per (scenario, policy, variant, lambda) cell."""
    cells: dict[tuple, list[RunRecord]] = {}
    for r in records:
        cells.setdefault((r.scenario, r.policy, r.variant, r.lam), []).append(r)
    rows = []
    for (scenario, policy, variant, lam), rs in cells.items():
        d_mean, d_std = _mean_std([r.delivery_rate for r in rs])
        l_mean, l_std = _mean_std([r.avg_latency_ms for r in rs if r.avg_latency_ms is not None])
        rows.append(
            {
                "scenario": scenario,
                "policy": policy,
                "variant": variant,
                "lam": lam,
                "n": len(rs),
                "delivery_mean": d_mean,
                "delivery_std": d_std,
                "latency_mean": l_mean,
                "latency_std": l_std,
                "overhead_bits": rs[0].overhead_bits,
            }
        )
    return rows


# ------------------------------------------------------------------ single simulations


def make_policy(name: str, model: Model | None = None, seed: int = 0):
    """A fresh policy object for one simulation."""
    if name in LEARNED:
        if model is None:
            raise HarnessError(f"policy {name!r} needs a checkpoint")
        return DramaPolicy(model.store, model.config, epsilon=0.0, seed=seed)
    if name == "spf":
        return SPFPolicy()
    if name == "bp":
        return BackpressurePolicy()
    if name == "qrouting":
        return QRoutingPolicy(epsilon=0.0, seed=seed, learn=True)
    raise HarnessError(f"unknown policy {name!r}; expected one of {POLICIES}")


def simulate(
    policy,
    topology: Topology,
    traffic: TrafficSpec,
    seed: int,
    steps: int = 512,
    events: Sequence[TopologyEvent] = (),
    sim_config: SimConfig | None = None,
    trace: list | None = None,
):
    sim = Simulator(topology, traffic, seed, events, sim_config, trace)
    for _ in range(steps):
        outcome = sim.step(policy.decide(sim))
        policy.observe(sim, outcome)
    return sim.metrics()


def _record(scenario, seed, policy, lam, variant, metrics, bits, wall) -> RunRecord:
    return RunRecord(
        scenario=scenario,
        seed=seed,
        policy=policy,
        lam=float(lam),
        variant=variant,
        delivery_rate=metrics.delivery_rate,
        avg_latency_ms=metrics.avg_latency_ms,
        latency_std=metrics.latency_std,
        overhead_bits=bits,
        generated=metrics.generated,
        delivered=metrics.delivered,
        lost=metrics.lost,
        wall_time=wall,
    )


# ------------------------------------------------------------------ scenarios


@dataclass
class Scenario:
    name: str
    topology: TopologyFile
    lambdas: tuple = (1.0, 2.0, 3.0, 4.0)
    seeds: tuple = tuple(range(10))
    policies: tuple = ("spf",)
    steps: int = 512
    sim_config: SimConfig | None = None
    # failure scenarios pick one element per simulation from these
    failure_links: tuple | None = None
    failure_routers: tuple = (5, 6, 7)
    event_step: int = 0
    # node_addition: the router added to the base topology
    addition: RouterAddition = RouterAddition(10, (Link(10, 0), Link(10, 9)))

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise HarnessError(f"unknown scenario {self.name!r}; expected one of {SCENARIOS}")
        for p in self.policies:
            if p not in POLICIES:
                raise HarnessError(f"unknown policy {p!r}; expected one of {POLICIES}")


def _failure_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x4641494C]))


def failure_event(scenario: Scenario, topology: Topology, seed: int) -> TopologyEvent:
    """The failure injected into simulation ``seed``."""
    rng = _failure_rng(seed)
    if scenario.name == "link_failure":
        pool = scenario.failure_links or tuple(sorted(topology.links))
        pair = pool[int(rng.integers(len(pool)))]
        return TopologyEvent(scenario.event_step, LinkFailure(tuple(pair)))
    pool = [r for r in scenario.failure_routers if r in topology]
    if not pool:
        raise HarnessError("no candidate routers to fail")
    return TopologyEvent(scenario.event_step, RouterFailure(pool[int(rng.integers(len(pool)))]))


def _cells(scenario: Scenario, models: Sequence[Model]) -> list[tuple[str, str, Model | None, float | None]]:
    """(policy, variant label, model, overhead bits) for every evaluated arm."""
    out = []
    for p in scenario.policies:
        if p not in LEARNED:
            out.append((p, "-", None, None))
            continue
        chosen = [m for m in models if m.label == p] or ([m for m in models] if p == "drama" else [])
        if not chosen:
            raise HarnessError(f"policy {p!r} needs a checkpoint")
        for m in chosen:
            if scenario.name == "overhead":
                for q, k in OVERHEAD_VARIANTS:
                    v = m.variant(quantize_bits=q, message_interval=k)
                    out.append((p, f"q{q or 32}_k{k}", v, overhead_bits(v.config)))
            else:
                c = m.config
                label = f"{c.ablation}_C{c.comm_rounds}" if scenario.name in ("ablation", "comm_rounds") else c.ablation
                out.append((p, label, m, overhead_bits(c)))
    return out


def run_scenario(
    scenario: Scenario,
    models: Sequence[Model] = (),
    trace: list | None = None,
    progress: Callable[[RunRecord], None] | None = None,
) -> list[RunRecord]:
    """Evaluate every (policy, variant, lambda, seed) cell. Never trains."""
    base_topo, base_traffic, base_events = scenario.topology
    digests = {id(m.store): (m.store.digest(), m.store.opt_steps) for m in models}
    records = []
    for policy, variant, model, bits in _cells(scenario, models):
        for lam in scenario.lambdas:
            traffic = base_traffic.with_lambda(lam)
            for seed in scenario.seeds:
                topo, events, label = base_topo, list(base_events), variant
                if scenario.name in ("link_failure", "node_failure"):
                    ev = failure_event(scenario, topo, seed)
                    events.append(ev)
                    label = f"{variant}|{_describe(ev.change)}"
                runs = [(label, topo, events)]
                if scenario.name == "node_addition":
                    added = topo.apply(scenario.addition)
                    runs = [(f"{variant}|base", topo, events), (f"{variant}|added", added, events)]
                for lab, t, ev in runs:
                    start = time.perf_counter()
                    pol = make_policy(policy, model, seed)
                    m = simulate(pol, t, traffic, seed, scenario.steps, ev, scenario.sim_config, trace if not records else None)
                    rec = _record(scenario.name, seed, policy, lam, lab, m, bits, time.perf_counter() - start)
                    records.append(rec)
                    if progress is not None:
                        progress(rec)
    for m in models:
        if (m.store.digest(), m.store.opt_steps) != digests[id(m.store)]:
            raise HarnessError("parameters changed during evaluation")
    return records


def _describe(change) -> str:
    if isinstance(change, LinkFailure):
        return f"link {change.pair[0]}-{change.pair[1]}"
    if isinstance(change, RouterFailure):
        return f"router {change.router}"
    return type(change).__name__


# ------------------------------------------------------------------ training entry point


def default_topology() -> TopologyFile:
    return read_topology(data_path(DEFAULT_TOPOLOGY))


def train_model(
    topology: TopologyFile,
    agent_config: AgentConfig,
    train_config: TrainConfig,
    seed: int = 0,
    label: str | None = None,
    log=None,
) -> tuple[Model, TrainResult]:
    topo, traffic, events = topology
    result = train_run(topo, traffic, agent_config, train_config, seed, events, log=log)
    if label is None:
        label = "drama_minus" if train_config.ec_weight == 0 else "drama"
    return Model(result.store, agent_config, train_config, label), result


CURVE_COLUMNS = ["episode", "env_steps", "epsilon", "lambda", "delivery_rate", "avg_latency_ms", "td_loss", "ec_loss"]


def write_curve(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) if not (isinstance(row[c], float) and math.isnan(row[c])) else "nan" for c in CURVE_COLUMNS])
    return path
