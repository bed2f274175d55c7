"""Double DQN with experience replay and feasibility masking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .env import Config, MCMLEnv, SystemState, tables
from .nn import AdamState, QNetwork, adam_step, backward_selected, encode_state, encode_state_table


class Experience(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int


class ReplayMemory:
    """Fixed-capacity FIFO ring of transitions (state indices) with uniform sampling."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros(capacity, dtype=np.int64)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self._head = 0

    def __len__(self):
        return self.size

    def push(self, exp: Experience):
        i = self._head
        self.states[i], self.actions[i], self.rewards[i], self.next_states[i] = exp
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __getitem__(self, k) -> Experience:
        """``k``-th oldest stored experience."""
        if not 0 <= k < self.size:
            raise IndexError(k)
        i = (self._head - self.size + k) % self.capacity
        return Experience(
            int(self.states[i]), int(self.actions[i]), float(self.rewards[i]), int(self.next_states[i])
        )

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Uniform draw with replacement; returns index arrays into the ring."""
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} from {self.size} experiences")
        idx = rng.integers(0, self.size, size=batch_size)
        return self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx]


@dataclass
class AgentConfig:
    discount: float = 0.9
    batch_size: int = 32
    target_period: int = 100
    epsilon_start: float = 0.9
    epsilon_end: float = 0.0
    epsilon_decay_fraction: float = 0.8
    episodes: int = 500
    iterations: int = 100
    replay_capacity: int = 10_000
    learning_rate: float = 0.001
    hidden: tuple = (32, 32, 32)
    seed: int | None = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 < self.batch_size <= self.replay_capacity:
            raise ValueError("need 0 < batch_size <= replay_capacity")
        if self.target_period < 1:
            raise ValueError("target_period must be >= 1")
        if self.episodes < 0 or self.iterations < 1:
            raise ValueError("episodes must be >= 0 and iterations >= 1")
        for eps in (self.epsilon_start, self.epsilon_end):
            if not 0 <= eps <= 1:
                raise ValueError("epsilon values must lie in [0, 1]")
        if not 0 < self.epsilon_decay_fraction <= 1:
            raise ValueError("epsilon_decay_fraction must lie in (0, 1]")
        if not 0 <= self.discount < 1:
            raise ValueError("discount must lie in [0, 1)")

    @property
    def total_iterations(self) -> int:
        return self.episodes * self.iterations


def epsilon_at(iteration: int, acfg: AgentConfig) -> float:
    """Linear decay from ``epsilon_start`` to ``epsilon_end`` over the first 80% of training."""
    horizon = acfg.epsilon_decay_fraction * acfg.total_iterations
    if horizon <= 0 or iteration >= horizon:
        return acfg.epsilon_end
    frac = iteration / horizon
    return acfg.epsilon_start + frac * (acfg.epsilon_end - acfg.epsilon_start)


def forward_selected(net: QNetwork, x, actions) -> np.ndarray:
    """``net(x)[k, actions[k]]`` without materialising the full output row.

    Uses the same arithmetic as the masked argmax, so the value of the
    argmax action equals the reported max bit for bit.
    """
    h = net._hidden(np.atleast_2d(x))[-1]
    return kernels.selected_q(h, net.params[-2], net.params[-1], actions)


def masked_argmax(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise argmax over feasible entries; ties go to the lowest index."""
    return np.where(mask, q, -np.inf).argmax(axis=-1)


def _as_csr(feasible):
    """Accept a boolean ``(B, A)`` mask or a ``(states, offsets, flat)`` triple."""
    if isinstance(feasible, tuple):
        return feasible
    mask = np.atleast_2d(np.asarray(feasible, dtype=bool))
    offsets = np.concatenate([[0], np.cumsum(mask.sum(axis=1))]).astype(np.int64)
    flat = np.nonzero(mask)[1].astype(np.int64)
    return np.arange(mask.shape[0], dtype=np.int64), offsets, flat


def greedy_feasible(net: QNetwork, x, feasible) -> np.ndarray:
    """Feasibility-masked argmax of ``net(x)`` per row (lowest index on ties)."""
    states, offsets, flat = _as_csr(feasible)
    h = net._hidden(np.atleast_2d(x))[-1]
    arg, _ = kernels.feasible_argmax(h, net.params[-2], net.params[-1], states, offsets, flat)
    return arg


def _select(net, x, s, csr, eps, rng):
    offsets, flat = csr
    if rng.random() < eps:
        return int(flat[offsets[s] + rng.integers(offsets[s + 1] - offsets[s])])
    return int(greedy_feasible(net, x, (np.array([s]), offsets, flat))[0])


def select_action(net: QNetwork, s: SystemState, eps: float, rng: np.random.Generator, cfg: Config) -> int:
    """Epsilon-greedy over the feasible set of ``s``; returns a full-grid action index."""
    t = tables(cfg)
    si = t.state_index(s.cpu, s.energy)
    return _select(net, encode_state(s, cfg), si, t.feasible_csr, eps, rng)


def double_q_target(rewards, next_x, next_feasible, online: QNetwork, target: QNetwork, gamma: float) -> np.ndarray:
    """``r + gamma * Q_target(s', argmax_feasible Q_online(s', .))``; no terminal cut-off.

    ``next_feasible`` is a boolean mask per row or a ``(states, offsets, flat)`` triple.
    """
    a_max = greedy_feasible(online, next_x, next_feasible)
    return np.asarray(rewards) + gamma * forward_selected(target, next_x, a_max)


class EpisodeMetrics(NamedTuple):
    episode: int
    reward: float
    energy: float
    latency: float
    data: float
    data_units: tuple


class EpisodeAccumulator:
    def __init__(self, cfg: Config):
        self.t = tables(cfg)
        self.n = 0
        self.rew = 0.0
        self.act_counts = np.zeros(self.t.grid_size, dtype=np.int64)

    def add(self, a, r):
        self.n += 1
        self.rew += r
        self.act_counts[a] += 1

    def finish(self, episode) -> EpisodeMetrics:
        w = self.act_counts / self.n
        t = self.t
        return EpisodeMetrics(
            episode,
            self.rew / self.n,
            float(w @ t.grid_energy),
            float(w @ t.grid_latency),
            float(w @ t.grid_data),
            tuple(float(x) for x in w @ t.action_d),
        )


def spawn_generators(seed, count=2):
    """Independent child generators from one seed: ``(env_rng, agent_rng, ...)``."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


@dataclass
class TrainResult:
    online: QNetwork
    target: QNetwork
    metrics: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    target_resets: list = field(default_factory=list)
    infeasible_actions: int = 0

    def greedy_policy(self, cfg: Config) -> np.ndarray:
        """Masked argmax action index for every state index."""
        t = tables(cfg)
        x = encode_state_table(cfg, t.state_cpu, t.state_energy)
        offsets, flat = t.feasible_csr
        return greedy_feasible(self.online, x, (np.arange(t.num_states), offsets, flat))


def train(cfg: Config, acfg: AgentConfig, on_step=None) -> TrainResult:
    """Run the full experience/training loop.

    ``on_step(iteration, state_index, action_index)`` is called for every
    executed action, if given.
    """
    env_rng, agent_rng = spawn_generators(acfg.seed)
    t = tables(cfg)
    env = MCMLEnv(cfg)
    env.rng = env_rng
    online = QNetwork.init((2 * cfg.num_devices, *acfg.hidden, t.grid_size), agent_rng)
    target = online.copy()
    opt = AdamState.for_network(online, lr=acfg.learning_rate)
    memory = ReplayMemory(acfg.replay_capacity)
    result = TrainResult(online, target)

    features = encode_state_table(cfg, t.state_cpu, t.state_energy)
    csr = t.feasible_csr
    offsets, flat = csr
    gamma = acfg.discount
    it = 0
    for ep in range(acfg.episodes):
        s = env.reset()
        acc = EpisodeAccumulator(cfg)
        for _ in range(acfg.iterations):
            eps = epsilon_at(it, acfg)
            a = _select(online, features[s], s, csr, eps, agent_rng)
            if not t.mask(s)[a]:
                result.infeasible_actions += 1
            if on_step is not None:
                on_step(it, s, a)
            s_next, r = env.step(a)
            memory.push(Experience(s, a, r, s_next))
            acc.add(a, r)
            it += 1

            if len(memory) >= acfg.batch_size:
                bs, ba, br, bn = memory.sample(acfg.batch_size, agent_rng)
                y = double_q_target(br, features[bn], (bn, offsets, flat), online, target, gamma)
                loss, grads = backward_selected(online, features[bs], ba, y)
                adam_step(online, grads, opt)
                result.losses.append(loss)
            if it % acfg.target_period == 0:
                target.load_from(online)
                result.target_resets.append(it)
            s = s_next
        result.metrics.append(acc.finish(ep))
    return result
