import json
import math

import numpy as np
import pytest

from drama import harness as H
from drama.agent import AgentConfig, init_params
from drama.nn.checkpoint import CheckpointError
from drama.topo import ATT_TOPOLOGY, LinkFailure, RouterFailure, data_path, read_topology
from drama.train import TrainConfig


@pytest.fixture(scope="module")
def tf():
    return H.default_topology()


@pytest.fixture(scope="module")
def model():
    cfg = AgentConfig()
    return H.Model(init_params(cfg, 0), cfg, TrainConfig(episodes=1))


def test_load_sweep_spf_records_and_trend(tf):
    sc = H.Scenario("load_sweep", tf, policies=("spf",), steps=256)
    recs = H.run_scenario(sc)
    assert len(recs) == 4 * 10
    means = [np.mean([r.delivery_rate for r in recs if r.lam == lam]) for lam in (1, 2, 3, 4)]
    assert means[0] == 1.0
    assert all(a >= b for a, b in zip(means, means[1:])) and means[-1] < means[0]


def test_overhead_bits_per_variant(tf, model):
    sc = H.Scenario("overhead", tf, lambdas=(1.0,), seeds=(0,), policies=("drama",), steps=32)
    recs = H.run_scenario(sc, [model])
    bits = {r.variant: r.overhead_bits for r in recs}
    assert bits == {"q32_k1": 256, "q1_k1": 8, "q32_k10": 25.6, "q1_k10": 0.8}


def test_node_addition_never_trains(tf, model):
    digest, steps = model.store.digest(), model.store.opt_steps
    sc = H.Scenario("node_addition", tf, lambdas=(1.0,), seeds=(0, 1), policies=("drama",), steps=64)
    recs = H.run_scenario(sc, [model])
    assert sorted({r.variant for r in recs}) == ["full|added", "full|base"]
    assert len(recs) == 4
    assert model.store.digest() == digest and model.store.opt_steps == steps


def test_failure_events_are_seeded_and_drawn_from_the_pools(tf):
    link_sc = H.Scenario("link_failure", tf)
    node_sc = H.Scenario("node_failure", tf)
    links = {H.failure_event(link_sc, tf.topology, s).change.pair for s in range(50)}
    assert links <= set(tf.topology.links) and len(links) > 5
    routers = {H.failure_event(node_sc, tf.topology, s).change.router for s in range(50)}
    assert routers == {5, 6, 7}
    assert H.failure_event(link_sc, tf.topology, 3) == H.failure_event(link_sc, tf.topology, 3)
    assert isinstance(H.failure_event(link_sc, tf.topology, 0).change, LinkFailure)
    assert isinstance(H.failure_event(node_sc, tf.topology, 0).change, RouterFailure)


def test_learned_policy_without_checkpoint_is_an_error(tf):
    with pytest.raises(H.HarnessError, match="checkpoint"):
        H.run_scenario(H.Scenario("load_sweep", tf, policies=("drama",), steps=8))
    with pytest.raises(H.HarnessError):
        H.Scenario("load_sweep", tf, policies=("nope",))
    with pytest.raises(H.HarnessError):
        H.Scenario("nope", tf)


def test_eval_records_are_reproducible(tf, model):
    sc = H.Scenario("load_sweep", tf, lambdas=(3.0,), seeds=(0, 1), policies=("drama", "spf", "bp", "qrouting"), steps=64)
    assert H.run_scenario(sc, [model]) == H.run_scenario(sc, [model])


def _rec(seed, d, lat, policy="spf"):
    return H.RunRecord("custom", seed, policy, 2.0, "-", d, lat, 0.5 if lat else None, None, 10, 9, 1)


def test_metrics_round_trip(tmp_path):
    recs = [_rec(0, 0.9, 3.25), _rec(1, 1.0, None), _rec(2, 0.1 + 0.2, 1 / 3)]
    path = H.export_metrics(recs, tmp_path / "out" / "m.csv")
    assert H.read_metrics(path) == recs
    assert (tmp_path / "out" / "m_summary.csv").exists()
    with pytest.raises(ValueError):
        H.export_metrics([], tmp_path / "x.csv")


def test_export_to_unwritable_path_raises(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(H.HarnessError):
        H.export_metrics([_rec(0, 1.0, 1.0)], blocker / "m.csv")


def test_aggregate_mean_and_sample_std():
    recs = [_rec(s, d, 2.0) for s, d in enumerate([0.8, 0.9, 1.0, 0.9, 0.9, 0.8, 1.0, 1.0, 0.7, 1.0])]
    (row,) = H.aggregate(recs)
    assert row["n"] == 10
    assert row["delivery_mean"] == pytest.approx(0.9)
    assert row["delivery_std"] == pytest.approx(np.std([r.delivery_rate for r in recs], ddof=1))
    assert row["latency_std"] == 0.0
    (single,) = H.aggregate([_rec(0, 1.0, None)])
    assert single["latency_mean"] is None and single["delivery_std"] == 0.0


def test_checkpoint_round_trip(tmp_path, model):
    path = H.save_model(tmp_path / "c.json", model, {"note": 1})
    back = H.load_model(path)
    assert back.store.digest() == model.store.digest()
    assert back.config == model.config and back.train_config == model.train_config
    same = H.checkpoint_io("load", H.checkpoint_io("save", tmp_path / "d.json", model) and tmp_path / "d.json")
    assert same.store.digest() == model.store.digest()
    with pytest.raises(ValueError):
        H.checkpoint_io("peek", path)


def test_checkpoint_mismatch_names_the_parameter(tmp_path, model):
    path = H.save_model(tmp_path / "c.json", model)
    with pytest.raises(CheckpointError, match=r"parameter .ecl1\.f2\.bn\.beta.: checkpoint shape \(8,\) != model shape \(16,\)"):
        H.load_model(path, AgentConfig(hidden_dim=16))
    with pytest.raises(H.HarnessError, match="not found"):
        H.load_model(tmp_path / "missing.json")


def test_checkpoint_size_is_independent_of_router_count(tmp_path, tf):
    att = read_topology(data_path(ATT_TOPOLOGY))
    shapes = []
    for topo in (tf, att):
        cfg = AgentConfig()
        m, _ = H.train_model(topo, cfg, TrainConfig(episodes=1, steps_per_episode=40, warmup=30, batch_size=4), 0)
        path = H.save_model(tmp_path / f"{len(topo.topology.routers)}.json", m)
        doc = json.loads(path.read_text())
        shapes.append({k: (v["shape"], len(v["values"])) for k, v in {**doc["params"], **doc["buffers"]}.items()})
    assert len(att.topology.routers) != len(tf.topology.routers)
    assert shapes[0] == shapes[1]


def test_write_curve(tmp_path):
    rows = [{"episode": 0, "env_steps": 10, "epsilon": 1.0, "lambda": 2, "delivery_rate": 1.0,
             "avg_latency_ms": 3.0, "td_loss": math.nan, "ec_loss": math.nan}]
    path = H.write_curve(rows, tmp_path / "curve.csv")
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[:3] == ["episode", "env_steps", "epsilon"] and len(lines) == 2
