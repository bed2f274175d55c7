"""Seeded experiment runs, the data-quality sweep, summaries and CSV output."""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .baselines import greedy_action, random_action, tabular_q_learning
from .config import ConfigError, ExperimentSpec
from .ddqn import EpisodeAccumulator, spawn_generators, train
from .env import Config, MCMLEnv, action_index, index_state, tables

CONVERGED_FRACTION = 0.2


class MetricRow(NamedTuple):
    scheme: str
    seed: int
    episode: int
    reward: float
    energy: float
    latency: float
    data: float
    data_units: tuple


# ------------------------------------------------------------ one replicate


@lru_cache(maxsize=8)
def greedy_policy_table(cfg: Config) -> np.ndarray:
    t = tables(cfg)
    return np.array([action_index(greedy_action(index_state(s, cfg), cfg), cfg) for s in range(t.num_states)])


def rollout(cfg: Config, choose, episodes: int, iterations: int, env_rng) -> list:
    """Per-episode metrics of ``choose(state_index) -> action_index`` over the episode structure."""
    env = MCMLEnv(cfg)
    env.rng = env_rng
    out = []
    for ep in range(episodes):
        s = env.reset()
        acc = EpisodeAccumulator(cfg)
        for _ in range(iterations):
            a = choose(s)
            s_next, r = env.step(a)
            acc.add(a, r)
            s = s_next
        out.append(acc.finish(ep))
    return out


def _episode_metrics(spec: ExperimentSpec, scheme: str, seed: int, checkpoint_dir=None) -> list:
    cfg, acfg = spec.env, spec.agent
    if scheme == "ddqn":
        res = train(cfg, replace(acfg, seed=seed))
        if checkpoint_dir is not None:
            res.online.save(os.path.join(checkpoint_dir, f"ddqn_seed{seed}.bin"))
        return res.metrics
    # same environment stream as ddqn: first child of the seed
    env_rng, agent_rng = spawn_generators(seed)
    if scheme == "greedy":
        policy = greedy_policy_table(cfg)
        choose = policy.__getitem__
    elif scheme == "random":
        def choose(s):
            return action_index(random_action(index_state(s, cfg), agent_rng, cfg), cfg)
    elif scheme == "tabular":
        policy = tabular_q_learning(cfg, spec.tabular, rng=agent_rng).greedy_policy()
        choose = policy.__getitem__
    else:
        raise ConfigError(f"unknown scheme {scheme!r}")
    return rollout(cfg, choose, acfg.episodes, acfg.iterations, env_rng)


def _replicate(job):
    spec, scheme, seed, label, checkpoint_dir = job
    metrics = _episode_metrics(spec, scheme, seed, checkpoint_dir)
    return [MetricRow(label, seed, m.episode, m.reward, m.energy, m.latency, m.data, m.data_units) for m in metrics]


def _run_jobs(jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        results = [_replicate(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate, jobs))
    return [row for rows in results for row in rows]


def run_experiment(spec: ExperimentSpec, schemes=None, checkpoint_dir=None) -> list:
    """Metric rows for every (scheme, seed); schemes default to ``spec.scheme``."""
    schemes = [spec.scheme] if schemes is None else list(schemes)
    jobs = [(spec, sc, seed, sc, checkpoint_dir) for sc in schemes for seed in spec.seeds]
    return _run_jobs(jobs, spec.jobs)


# ------------------------------------------------------------------- sweep


@dataclass
class SweepResult:
    parameter: str
    values: tuple
    seeds: tuple
    rows: list
    data_units: np.ndarray  # (values, seeds, devices), converged means

    def mean(self) -> np.ndarray:
        return self.data_units.mean(axis=1)

    def standard_error(self) -> np.ndarray:
        k = self.data_units.shape[1]
        if k < 2:
            return np.zeros(self.mean().shape)
        return self.data_units.std(axis=1, ddof=1) / math.sqrt(k)


def sweep_label(scheme: str, parameter: str, value: float) -> str:
    return f"{scheme}[{parameter}={value:g}]"


def run_quality_sweep(spec: ExperimentSpec) -> SweepResult:
    """Fresh run per sweep value and seed; records converged per-device mean data units."""
    if spec.env.num_devices < 2:
        raise ConfigError("the data-quality sweep needs at least two devices")
    jobs = []
    for v in spec.sweep_values:
        point = spec.with_parameter(spec.sweep_parameter, v)
        label = sweep_label(spec.scheme, spec.sweep_parameter, v)
        jobs += [(point, spec.scheme, seed, label, None) for seed in spec.seeds]
    rows = _run_jobs(jobs, spec.jobs)
    by_run = converged(rows)
    d = np.array(
        [[by_run[(sweep_label(spec.scheme, spec.sweep_parameter, v), s)]["data_units"] for s in spec.seeds]
         for v in spec.sweep_values]
    )
    return SweepResult(spec.sweep_parameter, spec.sweep_values, spec.seeds, rows, d)


def monotone_within_se(means, ses, increasing: bool) -> bool:
    """Consecutive points never move the wrong way by more than their pooled standard error."""
    means, ses = np.asarray(means, float), np.asarray(ses, float)
    step = np.diff(means) if increasing else -np.diff(means)
    pooled = np.sqrt(ses[1:] ** 2 + ses[:-1] ** 2)
    return bool((step >= -pooled).all())


# --------------------------------------------------------------- summaries


def moving_average(values, window: int) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` points average what is available."""
    x = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def converged(rows, fraction: float = CONVERGED_FRACTION) -> dict:
    """``(scheme, seed) -> {field: mean over the final fraction of episodes}``."""
    groups = {}
    for r in rows:
        groups.setdefault((r.scheme, r.seed), []).append(r)
    out = {}
    for key, rs in groups.items():
        rs.sort(key=lambda r: r.episode)
        k = max(1, math.ceil(fraction * len(rs)))
        tail = rs[-k:]
        out[key] = {
            "reward": float(np.mean([r.reward for r in tail])),
            "energy": float(np.mean([r.energy for r in tail])),
            "latency": float(np.mean([r.latency for r in tail])),
            "data": float(np.mean([r.data for r in tail])),
            "data_units": np.mean([r.data_units for r in tail], axis=0),
        }
    return out


class SchemeSummary(NamedTuple):
    scheme: str
    seeds: int
    mean: dict
    standard_error: dict
    smoothed_final: dict


def summarize(rows, window: int = 50) -> list:
    """Across-seed mean and standard error of converged values, plus final moving averages."""
    conv = converged(rows)
    schemes = sorted({s for s, _ in conv})
    out = []
    for sc in schemes:
        seeds = sorted(seed for s, seed in conv if s == sc)
        mean, se, smooth = {}, {}, {}
        for f in ("reward", "energy", "latency", "data"):
            vals = np.array([conv[(sc, seed)][f] for seed in seeds])
            mean[f] = float(vals.mean())
            se[f] = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
            finals = []
            for seed in seeds:
                series = [r for r in rows if r.scheme == sc and r.seed == seed]
                series.sort(key=lambda r: r.episode)
                finals.append(moving_average([getattr(r, f) for r in series], window)[-1])
            smooth[f] = float(np.mean(finals))
        out.append(SchemeSummary(sc, len(seeds), mean, se, smooth))
    return out


# --------------------------------------------------------------------- CSV


def _fmt(x) -> str:
    return f"{float(x):.6g}"


def csv_header(num_devices: int) -> list:
    return ["scheme", "seed", "episode", "reward", "energy", "latency", "data"] + [
        f"d_{n + 1}" for n in range(num_devices)
    ]


def emit_csv(rows, path, num_devices: int | None = None):
    """Rows sorted by (scheme, seed, episode); floats with 6 significant digits."""
    rows = sorted(rows, key=lambda r: (r.scheme, r.seed, r.episode))
    if num_devices is None:
        num_devices = len(rows[0].data_units) if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(num_devices))
        for r in rows:
            if len(r.data_units) != num_devices:
                raise ValueError("rows disagree on the number of devices")
            w.writerow(
                [r.scheme, r.seed, r.episode, _fmt(r.reward), _fmt(r.energy), _fmt(r.latency), _fmt(r.data)]
                + [_fmt(d) for d in r.data_units]
            )


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        n = len(header) - 7
        return [
            MetricRow(r[0], int(r[1]), int(r[2]), *map(float, r[3:7]), tuple(float(x) for x in r[7:7 + n]))
            for r in rd
        ]
