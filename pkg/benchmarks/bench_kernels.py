"""Compare the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py            # kernel timings
    python3 benchmarks/bench_kernels.py --e2e      # plus a short training run per backend

Sizes mirror a training batch on the default topology (32 snapshots of 10
routers, 34 directed edges each) and a 10x larger batch.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from drama.kernels import _numba, _numpy


def segments(rng, n_seg, mean_deg):
    counts = rng.poisson(mean_deg, n_seg)
    indptr = np.zeros(n_seg + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr


def line_csr(n):
    indptr, indices = [0], []
    for v in range(n):
        nb = [u for u in (v - 1, v + 1, v + 7) if 0 <= u < n]
        indices += nb
        indptr.append(len(indices))
    return np.array(indptr), np.array(indices, dtype=np.int64), np.ones(len(indices))


def cases(rng, n_seg):
    indptr = segments(rng, n_seg, 3.4)
    e = int(indptr[-1])
    scores = rng.normal(size=e)
    coef = _numpy.segment_softmax(scores, indptr)
    g = rng.normal(size=e)
    vals = rng.normal(size=(e, 8))
    idx = rng.integers(0, n_seg, e)
    csr = line_csr(n_seg)
    q = rng.integers(0, 50, n_seg).astype(float)
    return {
        "segment_softmax": lambda m: m.segment_softmax(scores, indptr),
        "segment_softmax_backward": lambda m: m.segment_softmax_backward(coef, g, indptr),
        "segment_sum": lambda m: m.segment_sum(vals, indptr),
        "scatter_add_rows": lambda m: m.scatter_add_rows(vals, idx, n_seg),
        "cost_to_target": lambda m: m.cost_to_target(*csr, q, np.int64(0)),
    }


def bench(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'rows':>7}{'numpy us':>12}{'numba us':>12}{'speedup':>9}")
    for n_seg in (320, 3200):
        for name, fn in cases(rng, n_seg).items():
            fn(_numba)  # compile outside the timed region
            t_np = min(timeit.repeat(lambda: fn(_numpy), number=repeat, repeat=5)) / repeat * 1e6
            t_nb = min(timeit.repeat(lambda: fn(_numba), number=repeat, repeat=5)) / repeat * 1e6
            print(f"{name:<26}{n_seg:>7}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>8.1f}x")


E2E = """
import time
from drama import kernels
from drama.harness import default_topology
from drama.agent import AgentConfig
from drama.train import TrainConfig, train_run
tf = default_topology()
cfg = TrainConfig(episodes=1, steps_per_episode=512, warmup=64, batch_size=32, train_interval=2)
train_run(tf.topology, tf.traffic.with_lambda(2), AgentConfig(), TrainConfig(episodes=1, steps_per_episode=80, warmup=16, batch_size=8))
t = time.perf_counter()
r = train_run(tf.topology, tf.traffic.with_lambda(2), AgentConfig(), cfg)
print(kernels.BACKEND, r.updates, round(time.perf_counter() - t, 2))
"""


def e2e():
    print("\nend to end: one 512-step training episode (backend, updates, seconds)")
    for flag in ("0", "1"):
        env = dict(os.environ, DRAMA_DISABLE_JIT=flag)
        out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        print(" ", out.stdout.strip())


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=200)
    p.add_argument("--e2e", action="store_true")
    args = p.parse_args()
    bench(args.repeat)
    if args.e2e:
        e2e()


if __name__ == "__main__":
    main()
