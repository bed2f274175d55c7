"""Command line entry point: ``mcml {run,compare,sweep,oracle,gradcheck}``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import numpy as np

from .baselines import (
    InstanceTooLargeError,
    discounted_return,
    tabular_q_learning,
    value_iteration,
    write_policy_csv,
    write_q_csv,
)
from .config import ConfigError, dump_spec, load_spec
from .env import tables
from .harness import emit_csv, monotone_within_se, run_experiment, run_quality_sweep, summarize
from .nn import QNetwork, grad_check

log = logging.getLogger("mcml")

TINY = dict(num_devices=1, max_data=2, energy_capacity=2, max_cpu_shares=2)


def _seeds(text: str) -> tuple:
    """``0,1,2`` or ``0-4``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out += range(int(lo), int(hi) + 1)
        elif part:
            out.append(int(part))
    return tuple(out)


def _common(p: argparse.ArgumentParser, scheme=True):
    p.add_argument("--config", help="experiment file (section.key = value lines)")
    if scheme:
        p.add_argument("--scheme", help="ddqn, greedy, random or tabular")
    p.add_argument("--seeds", type=_seeds, help="e.g. 0,1,2 or 0-4")
    p.add_argument("--episodes", type=int, help="episodes per run")
    p.add_argument("--output", help="CSV path for per-episode metrics")
    p.add_argument("--jobs", type=int, help="parallel replicate workers")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any parameter, e.g. env.arrival_rate=3")


def _spec(args, base=None):
    overrides = dict(base or {})
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "scheme", None):
        overrides["experiment.scheme"] = args.scheme
    if args.seeds is not None:
        overrides["experiment.seeds"] = args.seeds
    if args.episodes is not None:
        overrides["agent.episodes"] = args.episodes
    if args.output is not None:
        overrides["experiment.output"] = args.output
    if args.jobs is not None:
        overrides["experiment.jobs"] = args.jobs
    return load_spec(args.config, overrides)


def _print_summary(rows, window):
    print(f"{'scheme':<28} {'seeds':>5} {'reward':>10} {'energy':>16} {'latency':>16} {'data':>8}")
    for s in summarize(rows, window):
        print(
            f"{s.scheme:<28} {s.seeds:>5} {s.mean['reward']:>10.4f} "
            f"{s.mean['energy']:>8.4f} ±{s.standard_error['energy']:<6.4f} "
            f"{s.mean['latency']:>8.3f} ±{s.standard_error['latency']:<6.3f} {s.mean['data']:>8.4f}"
        )


def _emit(rows, spec):
    if spec.output:
        emit_csv(rows, spec.output, spec.env.num_devices)
        print(f"wrote {len(rows)} rows to {spec.output}")


def cmd_run(args) -> int:
    spec = _spec(args)
    if args.sweep:
        return _sweep(spec)
    if args.dump_config:
        print(dump_spec(spec), end="")
    rows = run_experiment(spec, checkpoint_dir=args.checkpoint_dir)
    _emit(rows, spec)
    _print_summary(rows, spec.window)
    return 0


def cmd_compare(args) -> int:
    spec = _spec(args)
    rows = run_experiment(spec, schemes=("ddqn", "greedy", "random"))
    _emit(rows, spec)
    _print_summary(rows, spec.window)
    means = {s.scheme: s.mean for s in summarize(rows, spec.window)}
    e_cut = 1 - means["ddqn"]["energy"] / means["greedy"]["energy"]
    l_cut = 1 - means["ddqn"]["latency"] / means["random"]["latency"]
    print(f"energy below greedy: {100 * e_cut:.1f}%   latency below random: {100 * l_cut:.1f}%")
    return 0


def _sweep(spec) -> int:
    res = run_quality_sweep(spec)
    _emit(res.rows, spec)
    mean, se = res.mean(), res.standard_error()
    n = mean.shape[1]
    print(f"{res.parameter:>24} " + " ".join(f"{'d_' + str(i + 1):>16}" for i in range(n)))
    for v, m, s in zip(res.values, mean, se):
        print(f"{v:>24g} " + " ".join(f"{a:>8.4f} ±{b:<6.4f}" for a, b in zip(m, s)))
    up = monotone_within_se(mean[:, 0], se[:, 0], increasing=True)
    down = all(monotone_within_se(mean[:, i], se[:, i], increasing=False) for i in range(1, n))
    print(f"d_1 nondecreasing: {up}   others nonincreasing: {down}")
    return 0


def cmd_sweep(args) -> int:
    return _sweep(_spec(args))


def cmd_oracle(args) -> int:
    # the small instance unless a config file says otherwise
    base = None if args.config else {f"env.{k}": v for k, v in TINY.items()}
    spec = _spec(args, base)
    cfg = spec.env
    vi = value_iteration(cfg, tolerance=1e-12)
    t = tables(cfg)
    print(f"value iteration: {vi.sweeps} sweeps, {t.num_states} states, {t.grid_size} actions")
    learn = spec.tabular
    if args.tabular_episodes is not None:
        learn = replace(learn, episodes=args.tabular_episodes)
    q = tabular_q_learning(cfg, learn)
    mask = t.mask_table
    err = np.max(np.abs(q.values - vi.q_values)[mask]) / np.max(np.abs(vi.q_values[mask]))
    match = float(np.mean(q.greedy_policy() == vi.policy))
    print(f"tabular Q: relative sup-norm error {err:.4f}, policy agreement {match:.3f}")
    ret = discounted_return(vi.policy, cfg, rollouts=args.rollouts, horizon=args.horizon, seed=0)
    print(f"optimal policy: mean discounted return {ret.mean():.4f} ± {ret.std(ddof=1) / np.sqrt(ret.size):.4f}")
    if args.output:
        write_q_csv(args.output + "_q.csv", vi.q_values, mask)
        write_policy_csv(args.output + "_policy.csv", vi.values, vi.policy)
        write_q_csv(args.output + "_tabular_q.csv", q.values, mask)
        print(f"wrote {args.output}_q.csv, {args.output}_policy.csv, {args.output}_tabular_q.csv")
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for k in range(args.nets):
        depth = int(rng.integers(1, 4))
        sizes = tuple(int(x) for x in rng.integers(2, 9, size=depth + 1))
        net = QNetwork.init(sizes, rng, bias_bound=0.1)
        batch = (rng.normal(size=(4, sizes[0])), rng.integers(0, sizes[-1], 4), rng.normal(size=4))
        err = grad_check(net, batch, tolerance=args.tolerance)
        worst = max(worst, err)
        print(f"net {k:>2} sizes {sizes}: max relative error {err:.3e}")
    ok = worst < args.tolerance
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {args.tolerance:g})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcml", description="Crowd federated-learning resource management experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one scheme over the configured seeds")
    _common(p)
    p.add_argument("--sweep", action="store_true", help="run the data-quality sweep instead")
    p.add_argument("--checkpoint-dir", help="save each trained ddqn network here")
    p.add_argument("--dump-config", action="store_true", help="print the resolved configuration")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="ddqn against greedy and random on the same environment streams")
    _common(p, scheme=False)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="converged data units per device as one device's quality varies")
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="value iteration and tabular Q-learning on a small instance")
    _common(p, scheme=False)
    p.add_argument("--tabular-episodes", type=int)
    p.add_argument("--rollouts", type=int, default=1000)
    p.add_argument("--horizon", type=int, default=200)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("gradcheck", help="finite-difference check of the network gradients")
    p.add_argument("--nets", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, InstanceTooLargeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
