"""Command line: ``drama train`` and ``drama eval``."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import harness
from .agent import ABLATIONS, AgentConfig
from .nn.checkpoint import CheckpointError
from .topo import TopologyError, data_path, read_topology, DEFAULT_TOPOLOGY
from .train import TrainConfig


def parse_list(text: str, cast=float) -> tuple:
    """``"1,2,4"`` or ``"0-9"`` (integer ranges) or a mix of both."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if cast is int and "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(cast(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty list {text!r}")
    return tuple(out)


def _int_list(text):
    return parse_list(text, int)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--topology", type=Path, help=f"topology file (default: bundled {DEFAULT_TOPOLOGY})")
    p.add_argument("--lambda", dest="lambdas", type=parse_list, help="traffic rates, e.g. 1,2,3")
    p.add_argument("--seeds", type=_int_list, help="seeds, e.g. 0-9 or 0,3,7")
    p.add_argument("--comm-rounds", type=int)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--quantize-bits", type=int, choices=(0, 1))
    p.add_argument("--msg-interval", type=int)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--trace", action="store_true", help="write the first simulation's event trace")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drama", description="Packet routing with learned neighbour communication")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a routing model and write a checkpoint plus learning curve")
    _add_common(t)
    t.add_argument("--policy", choices=harness.LEARNED, default="drama")
    t.add_argument("--episodes", type=int, default=40)
    t.add_argument("--ec-weight", type=float)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--train-interval", type=int, default=2)
    t.add_argument("--warmup", type=int, default=1000)
    t.add_argument("--checkpoint", type=Path, help="output checkpoint path (default: OUT/checkpoint.json)")

    e = sub.add_parser("eval", help="evaluate policies on a scenario")
    _add_common(e)
    e.add_argument("--scenario", choices=harness.SCENARIOS, default="load_sweep")
    e.add_argument("--policy", type=lambda s: tuple(x.strip() for x in s.split(",")), default=("spf",))
    e.add_argument("--checkpoint", type=Path, action="append", default=[], help="repeatable")
    e.add_argument("--episodes", type=int, help="steps per evaluation simulation (default 512)")
    e.add_argument("--ec-weight", type=float, help="ignored for eval; accepted for symmetry")
    return parser


def _topology(args):
    return read_topology(args.topology or data_path(DEFAULT_TOPOLOGY))


def _agent_overrides(args) -> dict:
    out = {}
    if args.comm_rounds is not None:
        out["comm_rounds"] = args.comm_rounds
    if args.ablation is not None:
        out["ablation"] = args.ablation
    if args.quantize_bits is not None:
        out["quantize_bits"] = args.quantize_bits
    if args.msg_interval is not None:
        out["message_interval"] = args.msg_interval
    return out


def cmd_train(args) -> int:
    topo = _topology(args)
    agent_cfg = AgentConfig(**_agent_overrides(args))
    ec = args.ec_weight if args.ec_weight is not None else (0.0 if args.policy == "drama_minus" else 1.0)
    train_cfg = TrainConfig(
        episodes=args.episodes,
        ec_weight=ec,
        batch_size=args.batch_size,
        train_interval=args.train_interval,
        warmup=args.warmup,
        lambdas=args.lambdas or (),
    )
    seed = args.seeds[0] if args.seeds else 0

    def log(row):
        print(f"episode {row['episode']:4d}  eps {row['epsilon']:.3f}  delivery {row['delivery_rate']:.4f}  "
              f"latency {row['avg_latency_ms']:.2f} ms", file=sys.stderr)

    model, result = harness.train_model(topo, agent_cfg, train_cfg, seed, args.policy, log)
    ckpt = args.checkpoint or args.out / "checkpoint.json"
    harness.save_model(ckpt, model, {"seed": seed, "updates": result.updates, "env_steps": result.env_steps})
    curve = harness.write_curve(result.curve, args.out / "learning_curve.csv")
    print(f"checkpoint: {ckpt}\nlearning curve: {curve}")
    return 0


def cmd_eval(args) -> int:
    topo = _topology(args)
    overrides = _agent_overrides(args)
    models = []
    for path in args.checkpoint:
        model = harness.load_model(path)
        structural = {k: v for k, v in overrides.items() if k in ("comm_rounds", "ablation")}
        if structural:
            harness.load_model(path, dataclasses.replace(model.config, **structural))
        runtime = {k: v for k, v in overrides.items() if k in ("quantize_bits", "message_interval")}
        models.append(model.variant(**runtime) if runtime else model)
    kwargs = {"policies": args.policy}
    if args.lambdas:
        kwargs["lambdas"] = args.lambdas
    elif args.scenario != "load_sweep":
        kwargs["lambdas"] = (topo.traffic.lam,)
    if args.seeds:
        kwargs["seeds"] = args.seeds
    elif args.scenario in ("link_failure", "node_failure"):
        kwargs["seeds"] = tuple(range(50))
    if args.episodes:
        kwargs["steps"] = args.episodes
    scenario = harness.Scenario(args.scenario, topo, **kwargs)
    trace = [] if args.trace else None
    records = harness.run_scenario(scenario, models, trace)
    out = harness.export_metrics(records, args.out / f"{args.scenario}.csv")
    if trace is not None:
        (args.out / "trace.txt").write_text("\n".join(trace) + "\n")
    for row in harness.aggregate(records):
        lat = "-" if row["latency_mean"] is None else f"{row['latency_mean']:.2f}"
        print(f"{row['policy']:<12} {row['variant']:<24} lambda={row['lam']:<5g} n={row['n']:<3} "
              f"delivery={row['delivery_mean']:.4f}±{row['delivery_std']:.4f} latency={lat}")
    print(f"records: {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args)
        return cmd_eval(args)
    except (harness.HarnessError, CheckpointError, TopologyError, ValueError, OSError) as exc:
        print(f"drama: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
