"""Non-learning policies and exact / tabular solvers for small instances."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from .env import (
    Config,
    JointAction,
    SystemState,
    energy_transition_matrix,
    sample_poisson,
    tables,
)

MAX_TABLE_ENTRIES = 10**6
MAX_VI_PAIRS = 5 * 10**6


class InstanceTooLargeError(ValueError):
    pass


def _device_options(state: SystemState, cfg: Config, n: int):
    """Feasible (d, e) pairs of device ``n``, in (d, e) order."""
    t = tables(cfg)
    dev = state.devices[n]
    local = dev.cpu_shares * (cfg.energy_capacity[n] + 1) + dev.energy_units
    idx = np.flatnonzero(t.dev_feas[n][local])
    return t.dev_d[n][idx], t.dev_e[n][idx]


def greedy_action(state: SystemState, cfg: Config) -> JointAction:
    """Per device: most data units, then the most energy the CPU and battery allow."""
    pairs = []
    for n in range(cfg.num_devices):
        d, e = _device_options(state, cfg, n)
        # lexicographic max over (d, e); options are sorted that way already
        pairs.append((int(d[-1]), int(e[-1])))
    return JointAction(tuple(pairs))


def random_action(state: SystemState, rng: np.random.Generator, cfg: Config) -> JointAction:
    pairs = []
    for n in range(cfg.num_devices):
        d, e = _device_options(state, cfg, n)
        k = rng.integers(d.size)
        pairs.append((int(d[k]), int(e[k])))
    return JointAction(tuple(pairs))


# ------------------------------------------------------------ value iteration


@dataclass
class _SparseMDP:
    """Feasible (state, action) pairs in CSR layout.

    Expected continuation depends only on the per-device residual energy
    ``c - e``: CPU shares are redrawn independently of the action.
    """

    offsets: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    residual: np.ndarray
    energy_mats: list


def _sparse_mdp(cfg: Config) -> _SparseMDP:
    t = tables(cfg)
    counts = np.array([len(t.feasible_indices(s)) for s in range(t.num_states)])
    if counts.sum() > MAX_VI_PAIRS:
        raise InstanceTooLargeError(f"{counts.sum()} feasible pairs exceed {MAX_VI_PAIRS}")
    offsets = np.concatenate([[0], np.cumsum(counts)])
    actions = np.concatenate([t.feasible_indices(s) for s in range(t.num_states)])
    states = np.repeat(np.arange(t.num_states), counts)
    resid = t.state_energy[states] - t.action_e[actions]
    caps = np.asarray(cfg.energy_capacity) + 1
    residual = np.ravel_multi_index(tuple(resid.T), tuple(caps))
    mats = [energy_transition_matrix(cfg.arrival_rate, c) for c in cfg.energy_capacity]
    return _SparseMDP(offsets, actions, t.grid_reward[actions], residual, mats)


def expected_next_value(v: np.ndarray, cfg: Config, energy_mats=None) -> np.ndarray:
    """``G[r]`` = E[V(s')] for residual-energy vector index ``r``."""
    t = tables(cfg)
    n = cfg.num_devices
    shape = []
    for i in range(n):
        shape += [cfg.max_cpu_shares[i] + 1, cfg.energy_capacity[i] + 1]
    g = v.reshape(shape).mean(axis=tuple(range(0, 2 * n, 2)))
    if energy_mats is None:
        energy_mats = [energy_transition_matrix(cfg.arrival_rate, c) for c in cfg.energy_capacity]
    for i, P in enumerate(energy_mats):
        g = np.moveaxis(np.tensordot(P, g, axes=([1], [i])), 0, i)
    assert g.size == np.prod(np.asarray(cfg.energy_capacity) + 1) and v.size == t.num_states
    return g.ravel()


@dataclass
class ValueIterationResult:
    values: np.ndarray
    policy: np.ndarray  # full-grid action index per state
    q_values: np.ndarray  # (num_states, grid_size), NaN where infeasible
    sweeps: int
    deltas: list


def value_iteration(
    cfg: Config, tolerance: float = 1e-9, max_sweeps: int = 100_000, reward_offset: float = 0.0
) -> ValueIterationResult:
    """Bellman-optimality iteration over feasible actions.

    Stops once the sup-norm change between sweeps drops below ``tolerance``.
    Ties in the greedy policy go to the lowest action index. ``reward_offset``
    is added to every immediate reward.
    """
    mdp = _sparse_mdp(cfg)
    if reward_offset:
        mdp.rewards = mdp.rewards + reward_offset
    t = tables(cfg)
    gamma = cfg.discount
    v = np.zeros(t.num_states)
    deltas = []
    sweeps = 0
    while sweeps < max_sweeps:
        g = expected_next_value(v, cfg, mdp.energy_mats)
        q = mdp.rewards + gamma * g[mdp.residual]
        v_new, _ = kernels.segment_max(q, mdp.offsets)
        delta = float(np.max(np.abs(v_new - v)))
        deltas.append(delta)
        v = v_new
        sweeps += 1
        if delta < tolerance:
            break
    g = expected_next_value(v, cfg, mdp.energy_mats)
    q = mdp.rewards + gamma * g[mdp.residual]
    _, arg = kernels.segment_max(q, mdp.offsets)
    policy = mdp.actions[mdp.offsets[:-1] + arg]
    if t.num_states * t.grid_size <= 5 * 10**7:
        q_full = np.full((t.num_states, t.grid_size), np.nan)
        states = np.repeat(np.arange(t.num_states), np.diff(mdp.offsets))
        q_full[states, mdp.actions] = q
    else:
        q_full = None
    return ValueIterationResult(v, policy, q_full, sweeps, deltas)


def bellman_residual(v: np.ndarray, cfg: Config) -> float:
    """Sup-norm of ``T V - V`` for the optimality operator ``T``."""
    mdp = _sparse_mdp(cfg)
    q = mdp.rewards + cfg.discount * expected_next_value(v, cfg, mdp.energy_mats)[mdp.residual]
    tv, _ = kernels.segment_max(q, mdp.offsets)
    return float(np.max(np.abs(tv - v)))


# --------------------------------------------------------- tabular Q-learning


@dataclass
class TabularConfig:
    episodes: int = 2000
    iterations: int = 100
    epsilon: float = 1.0
    # learning rate: fixed if not None, else (1 + visits) ** -lr_power
    learning_rate: float | None = None
    lr_power: float = 0.7
    seed: int | None = 0


class QTable:
    """Dense ``(num_states, grid_size)`` table; state index is mixed radix over (f, c)."""

    def __init__(self, cfg: Config, values=None):
        t = tables(cfg)
        entries = t.num_states * t.grid_size
        if entries > MAX_TABLE_ENTRIES:
            raise InstanceTooLargeError(f"{entries} Q-table entries exceed {MAX_TABLE_ENTRIES}")
        self.cfg = cfg
        self.values = np.zeros((t.num_states, t.grid_size)) if values is None else values
        self.visits = np.zeros(self.values.shape, dtype=np.int64)

    def greedy_policy(self) -> np.ndarray:
        masked = np.where(tables(self.cfg).mask_table, self.values, -np.inf)
        return masked.argmax(axis=1)

    def state_values(self) -> np.ndarray:
        masked = np.where(tables(self.cfg).mask_table, self.values, -np.inf)
        return masked.max(axis=1)


def tabular_q_learning(cfg: Config, learn: TabularConfig, rng: np.random.Generator | None = None) -> QTable:
    """Epsilon-greedy Q-learning with the max taken over actions feasible in ``s'``."""
    table = QTable(cfg)
    t = tables(cfg)
    rng = np.random.default_rng(learn.seed) if rng is None else rng
    mask = t.mask_table
    caps = np.asarray(cfg.energy_capacity, dtype=np.int64)
    f_caps = np.asarray(cfg.max_cpu_shares, dtype=np.int64)
    fixed_lr = -1.0 if learn.learning_rate is None else float(learn.learning_rate)
    T, n = learn.iterations, cfg.num_devices
    for _ in range(learn.episodes):
        cpu0 = rng.integers(0, f_caps + 1)
        s0 = t.state_index(cpu0, caps)
        arrivals = sample_poisson(cfg.arrival_rate, rng, size=(T, n))
        cpu_next = rng.integers(0, f_caps + 1, size=(T, n))
        u = rng.random((2, T))
        kernels.q_learning_loop(
            table.values, table.visits, mask, t.grid_reward, t.action_e, t.state_energy,
            t.state_radix, caps, s0, arrivals, cpu_next, u[0], u[1],
            float(learn.epsilon), float(cfg.discount), float(learn.lr_power), fixed_lr,
        )
    return table


# ----------------------------------------------------------- policy rollout


def discounted_return(policy: np.ndarray, cfg: Config, rollouts: int, horizon: int, seed=0) -> np.ndarray:
    """Monte Carlo discounted returns of a deterministic index policy.

    Each rollout starts from full batteries with uniformly drawn CPU shares.
    """
    t = tables(cfg)
    rng = np.random.default_rng(seed)
    caps = np.asarray(cfg.energy_capacity)
    f_caps = np.asarray(cfg.max_cpu_shares)
    cap1 = caps + 1
    radix = t.state_radix
    out = np.empty(rollouts)
    for k in range(rollouts):
        cpu = rng.integers(0, f_caps + 1)
        energy = caps.copy()
        ret, disc = 0.0, 1.0
        for _ in range(horizon):
            s = int(np.ravel_multi_index(tuple(cpu * cap1 + energy), tuple(radix)))
            a = policy[s]
            ret += disc * t.grid_reward[a]
            disc *= cfg.discount
            arrivals = sample_poisson(cfg.arrival_rate, rng, size=cfg.num_devices)
            energy = np.minimum(energy - t.action_e[a] + arrivals, caps)
            cpu = rng.integers(0, f_caps + 1)
        out[k] = ret
    return out


# ------------------------------------------------------------------ export


def write_q_csv(path, q_values: np.ndarray, mask: np.ndarray | None = None):
    """Rows ``state,action,value``; infeasible entries are skipped when a mask is given."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state", "action", "value"])
        for s in range(q_values.shape[0]):
            for a in range(q_values.shape[1]):
                if mask is None or mask[s, a]:
                    w.writerow([s, a, f"{q_values[s, a]:.10g}"])


def write_policy_csv(path, values: np.ndarray, policy: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state", "action", "value"])
        for s, (a, v) in enumerate(zip(policy, values)):
            w.writerow([s, int(a), f"{v:.10g}"])
