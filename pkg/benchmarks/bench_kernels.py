"""Time the compiled kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--no-train]

The training comparison runs a short DDQN job twice in subprocesses, once
with ``MCML_NUMBA=0``, and checks that both produce identical metrics.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from mcml import kernels
from mcml._accel import NUMBA_ENABLED
from mcml.baselines import _sparse_mdp, expected_next_value
from mcml.env import Config, tables


def _best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_cases():
    rng = np.random.default_rng(0)
    cfg = Config()
    t = tables(cfg)
    offsets, flat = t.feasible_csr

    n = 6 * 32 + 2 * 32 * 32 + 32 * 4096 + 3 * 32 + 4096
    p, g, m = (rng.normal(size=n) for _ in range(3))
    v = np.abs(rng.normal(size=n))
    adam_args = (1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8)

    h = rng.normal(size=(32, 32))
    w = rng.normal(size=(32, 4096))
    b = rng.normal(size=4096)
    states = rng.integers(0, t.num_states, 32)

    mdp = _sparse_mdp(cfg)
    q = mdp.rewards + 0.9 * expected_next_value(np.zeros(t.num_states), cfg, mdp.energy_mats)[mdp.residual]

    return {
        "adam_update (138k params)": (
            lambda: kernels.adam_update(p, g, m, v, *adam_args),
            lambda: kernels.adam_update_numpy(p, g, m, v, *adam_args),
        ),
        "feasible_argmax (batch 32)": (
            lambda: kernels.feasible_argmax(h, w, b, states, offsets, flat),
            lambda: kernels.feasible_argmax_numpy(h, w, b, states, offsets, flat),
        ),
        "segment_max (VI sweep)": (
            lambda: kernels.segment_max(q, mdp.offsets),
            lambda: kernels.segment_max_numpy(q, mdp.offsets),
        ),
    }


_TRAIN_SNIPPET = """
import json, time
from mcml.env import Config
from mcml.ddqn import AgentConfig, train
t0 = time.perf_counter()
r = train(Config(), AgentConfig(episodes={episodes}, seed=0))
dt = time.perf_counter() - t0
print(json.dumps({{"seconds": dt, "reward": [m.reward for m in r.metrics], "loss": r.losses[-1]}}))
"""


def train_case(episodes):
    out = {}
    for label, flag in (("numba", "1"), ("numpy", "0")):
        env = dict(os.environ, MCML_NUMBA=flag)
        # warm the compile cache first so timings measure steady state
        code = _TRAIN_SNIPPET.format(episodes=episodes)
        subprocess.run([sys.executable, "-c", _TRAIN_SNIPPET.format(episodes=1)], env=env, check=True,
                       capture_output=True)
        res = subprocess.run([sys.executable, "-c", code], env=env, check=True, capture_output=True, text=True)
        out[label] = json.loads(res.stdout)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--episodes", type=int, default=5)
    ap.add_argument("--no-train", action="store_true")
    args = ap.parse_args()
    if not NUMBA_ENABLED:
        print("numba disabled (MCML_NUMBA=0 or not installed): both columns use the same code")

    print(f"{'kernel':<30} {'compiled':>12} {'numpy':>12} {'speedup':>8}")
    for name, (fast, slow) in kernel_cases().items():
        fast()  # compile
        tf = _best(fast, args.repeat, 10)
        ts = _best(slow, args.repeat, 10)
        print(f"{name:<30} {tf * 1e6:>10.1f}us {ts * 1e6:>10.1f}us {ts / tf:>7.1f}x")

    if not args.no_train:
        res = train_case(args.episodes)
        steps = args.episodes * 100
        a, b = res["numba"], res["numpy"]
        same = a["reward"] == b["reward"]
        print(f"\nDDQN training, {steps} steps")
        print(f"  numba  {a['seconds'] / steps * 1e3:.2f} ms/step")
        print(f"  numpy  {b['seconds'] / steps * 1e3:.2f} ms/step  ({b['seconds'] / a['seconds']:.1f}x slower)")
        print(f"  identical episode rewards: {same}")


if __name__ == "__main__":
    main()
