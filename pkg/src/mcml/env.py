"""The mobile-crowd training-management MDP.

A server asks each of ``N`` devices for ``d`` data units and ``e`` energy
units per round. A device's state is its CPU shares ``f`` and stored energy
``c``. Energy is replenished by Poisson arrivals, CPU shares are redrawn
uniformly every round.

Indexing conventions (mixed radix, device 0 most significant):

* device action ``(d, e)`` -> ``d * (C + 1) + e``
* device state ``(f, c)`` -> ``f * (C + 1) + c``
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from functools import cached_property, lru_cache
from typing import NamedTuple, Sequence

import numpy as np


# Relative slack on the CPU constraint so that exact boundary cases survive
# floating-point rounding.
_CPU_RTOL = 1e-12

_PER_DEVICE = (
    "data_quality",
    "max_data",
    "energy_capacity",
    "max_cpu_shares",
    "transmission_time_s",
)


class InfeasibleActionError(ValueError):
    """An action violates the device constraints for the given state."""


@dataclass(frozen=True)
class Config:
    """Environment constants.

    Per-device fields accept a scalar (broadcast to every device) or a
    sequence of length ``num_devices``; they are stored as tuples.
    """

    num_devices: int = 3
    energy_unit_joules: float = 1.0
    cpu_share_hz: float = 0.6e9
    cycles_per_data_unit: float = 1e10
    switched_capacitance: float = 1e-28
    arrival_rate: float = 2.0
    data_quality: Sequence[float] | float = 1.0
    max_data: Sequence[int] | int = 3
    energy_capacity: Sequence[int] | int = 3
    max_cpu_shares: Sequence[int] | int = 3
    transmission_time_s: Sequence[float] | float = 5.0
    reward_weights: tuple[float, float, float] = (2.0, 1.5, 0.5)
    discount: float = 0.9
    normalizers: tuple[float, float, float] = field(init=False)

    def __post_init__(self):
        n = int(self.num_devices)
        if n < 1:
            raise ValueError("num_devices must be >= 1")
        object.__setattr__(self, "num_devices", n)
        for name in _PER_DEVICE:
            value = getattr(self, name)
            if np.ndim(value) == 0:
                value = (value,) * n
            value = tuple(value)
            if len(value) != n:
                raise ValueError(f"{name} has {len(value)} entries, expected {n}")
            cast = float if name in ("data_quality", "transmission_time_s") else int
            object.__setattr__(self, name, tuple(cast(v) for v in value))
        object.__setattr__(
            self, "reward_weights", tuple(float(w) for w in self.reward_weights)
        )
        if len(self.reward_weights) != 3:
            raise ValueError("reward_weights must be (alpha_D, alpha_L, alpha_E)")

        for name in ("max_data", "energy_capacity", "max_cpu_shares"):
            if min(getattr(self, name)) < 1:
                raise ValueError(f"{name} entries must be >= 1")
        if min(self.data_quality) <= 0:
            raise ValueError("data_quality entries must be > 0")
        if min(self.transmission_time_s) < 0:
            raise ValueError("transmission_time_s entries must be >= 0")
        for name in (
            "energy_unit_joules",
            "cpu_share_hz",
            "cycles_per_data_unit",
            "switched_capacitance",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not self.arrival_rate >= 0:
            raise ValueError("arrival_rate must be >= 0")
        if not 0 <= self.discount < 1:
            raise ValueError("discount must lie in [0, 1)")
        if min(self.reward_weights) < 0:
            raise ValueError("reward_weights must be non-negative")

        eta = np.asarray(self.data_quality)
        d_max = float(eta @ np.asarray(self.max_data) / eta.sum())
        e_max = float(sum(self.energy_capacity))
        l_max = max(
            self.training_time(dn, 1) + lt
            for dn, lt in zip(self.max_data, self.transmission_time_s)
        )
        object.__setattr__(self, "normalizers", (d_max, l_max, e_max))

    def training_time(self, d, e):
        """Seconds to train ``d`` units with ``e`` energy units (``d, e >= 1``)."""
        return math.sqrt(
            self.switched_capacitance
            * self.cycles_per_data_unit**3
            * d**3
            / (self.energy_unit_joules * e)
        )

    def replace(self, **changes) -> "Config":
        kwargs = {f.name: getattr(self, f.name) for f in fields(self) if f.init}
        kwargs.update(changes)
        return Config(**kwargs)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.init}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    @property
    def num_states(self) -> int:
        return tables(self).num_states

    @property
    def grid_size(self) -> int:
        return tables(self).grid_size


class DeviceState(NamedTuple):
    cpu_shares: int
    energy_units: int


@dataclass(frozen=True)
class SystemState:
    devices: tuple[DeviceState, ...]

    @classmethod
    def of(cls, *pairs) -> "SystemState":
        """``SystemState.of((f1, c1), (f2, c2), ...)``."""
        return cls(tuple(DeviceState(int(f), int(c)) for f, c in pairs))

    @property
    def cpu(self) -> np.ndarray:
        return np.array([d.cpu_shares for d in self.devices], dtype=np.int64)

    @property
    def energy(self) -> np.ndarray:
        return np.array([d.energy_units for d in self.devices], dtype=np.int64)


@dataclass(frozen=True)
class JointAction:
    pairs: tuple[tuple[int, int], ...]

    @classmethod
    def of(cls, *pairs) -> "JointAction":
        return cls(tuple((int(d), int(e)) for d, e in pairs))

    @classmethod
    def idle(cls, num_devices: int) -> "JointAction":
        return cls(((0, 0),) * num_devices)

    @property
    def data(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.int64)

    @property
    def energy(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.int64)


class Metrics(NamedTuple):
    accumulated_data: float
    total_energy: float
    latency: float
    data_units: tuple[int, ...]


class StepOutcome(NamedTuple):
    next_state: SystemState
    reward: float
    metrics: Metrics


# ---------------------------------------------------------------- physics


def required_cpu_freq(d, e, cfg: Config) -> float:
    """CPU frequency (Hz) needed to train ``d`` units on ``e`` energy units."""
    if d == 0:
        return 0.0
    return math.sqrt(
        cfg.energy_unit_joules * e / (cfg.switched_capacitance * cfg.cycles_per_data_unit * d)
    )


def _device_feasible(n, f, c, d, e, cfg):
    if d < 0 or e < 0 or d > cfg.max_data[n] or e > c:
        return False
    if (d == 0) != (e == 0):
        return False
    return required_cpu_freq(d, e, cfg) <= cfg.cpu_share_hz * f * (1 + _CPU_RTOL)


def device_feasible(dev: DeviceState, d, e, cfg: Config, device: int = 0) -> bool:
    """Whether device ``device`` in state ``dev`` can serve ``(d, e)``."""
    return _device_feasible(device, dev.cpu_shares, dev.energy_units, d, e, cfg)


def device_latency(n, d, e, cfg: Config) -> float:
    """Download + train + upload time; zero for a device that sits out."""
    if d == 0:
        return 0.0
    return cfg.cycles_per_data_unit * d / required_cpu_freq(d, e, cfg) + cfg.transmission_time_s[n]


# ------------------------------------------------------- derived tables


class Tables:
    """Per-device lookup tables derived from a Config; build via ``tables(cfg)``."""

    def __init__(self, cfg: Config):
        self.cfg = cfg
        n = cfg.num_devices
        self.action_radix = np.array(
            [(cfg.max_data[i] + 1) * (cfg.energy_capacity[i] + 1) for i in range(n)]
        )
        self.state_radix = np.array(
            [(cfg.max_cpu_shares[i] + 1) * (cfg.energy_capacity[i] + 1) for i in range(n)]
        )
        self.grid_size = int(np.prod(self.action_radix))
        self.num_states = int(np.prod(self.state_radix))

        self.dev_d, self.dev_e, self.dev_lat, self.dev_feas = [], [], [], []
        for i in range(n):
            cap = cfg.energy_capacity[i] + 1
            d = np.repeat(np.arange(cfg.max_data[i] + 1), cap)
            e = np.tile(np.arange(cap), cfg.max_data[i] + 1)
            lat = np.array([device_latency(i, dd, ee, cfg) if (dd == 0) == (ee == 0) else 0.0
                            for dd, ee in zip(d, e)])
            feas = np.zeros((self.state_radix[i], self.action_radix[i]), dtype=bool)
            for f in range(cfg.max_cpu_shares[i] + 1):
                for c in range(cap):
                    feas[f * cap + c] = [
                        _device_feasible(i, f, c, dd, ee, cfg) for dd, ee in zip(d, e)
                    ]
            self.dev_d.append(d)
            self.dev_e.append(e)
            self.dev_lat.append(lat)
            self.dev_feas.append(feas)

        # joint-action decomposition, device 0 most significant
        local = np.stack(
            np.unravel_index(np.arange(self.grid_size), tuple(self.action_radix)), axis=1
        )
        self.action_local = local
        self.action_d = np.stack([self.dev_d[i][local[:, i]] for i in range(n)], axis=1)
        self.action_e = np.stack([self.dev_e[i][local[:, i]] for i in range(n)], axis=1)
        eta = np.asarray(cfg.data_quality)
        self.grid_data = self.action_d @ eta / eta.sum()
        self.grid_energy = self.action_e.sum(axis=1).astype(float)
        self.grid_latency = np.max(
            np.stack([self.dev_lat[i][local[:, i]] for i in range(n)], axis=1), axis=1
        )
        a_d, a_l, a_e = cfg.reward_weights
        d_max, l_max, e_max = cfg.normalizers
        self.grid_reward = (
            a_d * self.grid_data / d_max
            - a_l * self.grid_latency / l_max
            - a_e * self.grid_energy / e_max
        )
        self._masks: dict[int, np.ndarray] = {}
        self._feasible_idx: dict[int, np.ndarray] = {}

    @cached_property
    def state_local(self) -> np.ndarray:
        return np.stack(
            np.unravel_index(np.arange(self.num_states), tuple(self.state_radix)), axis=1
        )

    @cached_property
    def state_cpu(self) -> np.ndarray:
        caps = np.array(self.cfg.energy_capacity) + 1
        return self.state_local // caps

    @cached_property
    def state_energy(self) -> np.ndarray:
        caps = np.array(self.cfg.energy_capacity) + 1
        return self.state_local % caps

    def state_index(self, cpu, energy) -> int:
        caps = np.asarray(self.cfg.energy_capacity) + 1
        local = np.asarray(cpu) * caps + np.asarray(energy)
        return int(np.ravel_multi_index(tuple(local), tuple(self.state_radix)))

    def mask(self, s: int) -> np.ndarray:
        """Boolean feasibility mask over the full action grid for state index ``s``."""
        m = self._masks.get(s)
        if m is None:
            local = np.unravel_index(s, tuple(self.state_radix))
            m = self.dev_feas[0][local[0]]
            for i in range(1, self.cfg.num_devices):
                m = np.logical_and.outer(m, self.dev_feas[i][local[i]]).ravel()
            m = np.ascontiguousarray(m)
            m.setflags(write=False)
            self._masks[s] = m
        return m

    def feasible_indices(self, s: int) -> np.ndarray:
        idx = self._feasible_idx.get(s)
        if idx is None:
            idx = np.flatnonzero(self.mask(s))
            idx.setflags(write=False)
            self._feasible_idx[s] = idx
        return idx

    @cached_property
    def feasible_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """``(offsets, flat)``: feasible action indices of state ``s`` are
        ``flat[offsets[s]:offsets[s + 1]]``."""
        idx = [self.feasible_indices(s) for s in range(self.num_states)]
        offsets = np.concatenate([[0], np.cumsum([len(i) for i in idx])]).astype(np.int64)
        return offsets, np.concatenate(idx).astype(np.int64)

    @cached_property
    def mask_table(self) -> np.ndarray:
        """``(num_states, grid_size)`` feasibility matrix. Guarded against huge instances."""
        if self.num_states * self.grid_size > 5 * 10**7:
            raise ValueError("instance too large for a dense mask table")
        return np.stack([self.mask(s) for s in range(self.num_states)])


@lru_cache(maxsize=32)
def tables(cfg: Config) -> Tables:
    return Tables(cfg)


# -------------------------------------------------------- action space


def enumerate_feasible(state: SystemState, cfg: Config) -> list[JointAction]:
    """All feasible joint actions, lexicographic in (device, d, e)."""
    t = tables(cfg)
    return [index_action(int(i), cfg) for i in t.feasible_indices(state_index(state, cfg))]


def action_index(a: JointAction, cfg: Config) -> int:
    idx = 0
    for n, (d, e) in enumerate(a.pairs):
        if not (0 <= d <= cfg.max_data[n] and 0 <= e <= cfg.energy_capacity[n]):
            raise ValueError(f"action component out of grid at device {n}: {(d, e)}")
        idx = idx * ((cfg.max_data[n] + 1) * (cfg.energy_capacity[n] + 1)) + d * (
            cfg.energy_capacity[n] + 1
        ) + e
    if len(a.pairs) != cfg.num_devices:
        raise ValueError("action has the wrong number of devices")
    return idx


def index_action(i: int, cfg: Config) -> JointAction:
    t = tables(cfg)
    if not 0 <= i < t.grid_size:
        raise ValueError(f"action index {i} outside [0, {t.grid_size})")
    return JointAction(tuple(zip(t.action_d[i].tolist(), t.action_e[i].tolist())))


def state_index(state: SystemState, cfg: Config) -> int:
    if len(state.devices) != cfg.num_devices:
        raise ValueError("state has the wrong number of devices")
    for n, dev in enumerate(state.devices):
        if not (0 <= dev.cpu_shares <= cfg.max_cpu_shares[n]
                and 0 <= dev.energy_units <= cfg.energy_capacity[n]):
            raise ValueError(f"device {n} state out of bounds: {dev}")
    return tables(cfg).state_index(state.cpu, state.energy)


def index_state(s: int, cfg: Config) -> SystemState:
    t = tables(cfg)
    if not 0 <= s < t.num_states:
        raise ValueError(f"state index {s} outside [0, {t.num_states})")
    local = np.unravel_index(s, tuple(t.state_radix))
    caps = np.asarray(cfg.energy_capacity) + 1
    return SystemState.of(*((int(l // k), int(l % k)) for l, k in zip(local, caps)))


def _check_feasible(state: SystemState, a: JointAction, cfg: Config):
    if len(a.pairs) != cfg.num_devices or len(state.devices) != cfg.num_devices:
        raise InfeasibleActionError("device count mismatch")
    for n, (dev, (d, e)) in enumerate(zip(state.devices, a.pairs)):
        if not device_feasible(dev, d, e, cfg, device=n):
            raise InfeasibleActionError(f"device {n} cannot serve (d={d}, e={e}) in state {dev}")


# --------------------------------------------------------------- reward


def reward_components(state: SystemState, a: JointAction, cfg: Config) -> tuple[float, float, float]:
    """Accumulated data ``D``, total energy ``E`` and round latency ``L``."""
    _check_feasible(state, a, cfg)
    eta = cfg.data_quality
    data = sum(q * d for q, (d, _) in zip(eta, a.pairs)) / sum(eta)
    energy = float(sum(e for _, e in a.pairs))
    latency = max(device_latency(n, d, e, cfg) for n, (d, e) in enumerate(a.pairs))
    return data, energy, latency


def combine_reward(data, latency, energy, cfg: Config) -> float:
    a_d, a_l, a_e = cfg.reward_weights
    d_max, l_max, e_max = cfg.normalizers
    return a_d * data / d_max - a_l * latency / l_max - a_e * energy / e_max


def reward(state: SystemState, a: JointAction, cfg: Config) -> float:
    data, energy, latency = reward_components(state, a, cfg)
    return combine_reward(data, latency, energy, cfg)


# ------------------------------------------------------------- dynamics


def sample_poisson(rate: float, rng: np.random.Generator, size=None):
    """Exact Poisson draw(s) by Knuth's multiplicative method.

    Intended for moderate rates (``rate <= 10``); cost grows linearly with it.
    """
    if rate < 0:
        raise ValueError("rate must be >= 0")
    if size is None:
        if rate == 0:
            return 0
        limit = math.exp(-rate)
        k, p = 0, rng.random()
        while p > limit:
            k += 1
            p *= rng.random()
        return k
    out = np.zeros(size, dtype=np.int64)
    if rate == 0:
        return out
    flat = out.reshape(-1)
    prod = rng.random(flat.size)
    active = np.flatnonzero(prod > math.exp(-rate))
    while active.size:
        flat[active] += 1
        prod[active] *= rng.random(active.size)
        active = active[prod[active] > math.exp(-rate)]
    return out


def _advance(cfg: Config, energy, data_energy, rng):
    """Sample next (cpu, energy); device 0 first, energy arrival before CPU."""
    n = cfg.num_devices
    cpu_next = np.empty(n, dtype=np.int64)
    energy_next = np.empty(n, dtype=np.int64)
    for i in range(n):
        arrivals = sample_poisson(cfg.arrival_rate, rng)
        energy_next[i] = min(energy[i] - data_energy[i] + arrivals, cfg.energy_capacity[i])
        cpu_next[i] = rng.integers(0, cfg.max_cpu_shares[i] + 1)
    return cpu_next, energy_next


def step(state: SystemState, a: JointAction, cfg: Config, rng: np.random.Generator) -> StepOutcome:
    data, energy, latency = reward_components(state, a, cfg)
    cpu_next, energy_next = _advance(cfg, state.energy, a.energy, rng)
    nxt = SystemState(tuple(DeviceState(int(f), int(c)) for f, c in zip(cpu_next, energy_next)))
    return StepOutcome(
        nxt,
        combine_reward(data, latency, energy, cfg),
        Metrics(data, energy, latency, tuple(int(d) for d in a.data)),
    )


def energy_transition_matrix(rate: float, capacity: int) -> np.ndarray:
    """``P[r, v]`` = probability of ending at ``v`` units from residual ``r = c - e``.

    Arrivals are Poisson(rate); everything at or above ``capacity`` is clipped.
    """
    P = np.zeros((capacity + 1, capacity + 1))
    if rate == 0:
        np.fill_diagonal(P, 1.0)
        return P
    k = np.arange(capacity + 1)
    pmf = np.exp(-rate + k * math.log(rate) - np.array([math.lgamma(x + 1) for x in k]))
    for r in range(capacity + 1):
        head = pmf[: capacity - r]
        P[r, r:capacity] = head
        P[r, capacity] = max(0.0, 1.0 - head.sum())
    return P


def transition_distribution(state: SystemState, a: JointAction, cfg: Config):
    """Exact next-state distribution as a list of ``(SystemState, probability)``.

    Only states with positive probability are listed, in state-index order.
    """
    _check_feasible(state, a, cfg)
    marginals = []
    for n, (dev, (_, e)) in enumerate(zip(state.devices, a.pairs)):
        cap = cfg.energy_capacity[n]
        p_energy = energy_transition_matrix(cfg.arrival_rate, cap)[dev.energy_units - e]
        p_cpu = np.full(cfg.max_cpu_shares[n] + 1, 1.0 / (cfg.max_cpu_shares[n] + 1))
        marginals.append(np.outer(p_cpu, p_energy).ravel())
    joint = marginals[0]
    for m in marginals[1:]:
        joint = np.multiply.outer(joint, m).ravel()
    return [(index_state(int(s), cfg), float(joint[s])) for s in np.flatnonzero(joint > 0)]


# ----------------------------------------------------------- stateful env


class MCMLEnv:
    """Seeded rollout wrapper working on state/action indices.

    Uses the same draws, in the same order, as :func:`step`.
    """

    def __init__(self, cfg: Config, seed=None):
        self.cfg = cfg
        self.tables = tables(cfg)
        self.rng = np.random.default_rng(seed)
        self.cpu = np.zeros(cfg.num_devices, dtype=np.int64)
        self.energy = np.array(cfg.energy_capacity, dtype=np.int64)

    @property
    def state_index(self) -> int:
        return self.tables.state_index(self.cpu, self.energy)

    @property
    def state(self) -> SystemState:
        return SystemState.of(*zip(self.cpu, self.energy))

    def reset(self) -> int:
        """Full batteries, CPU shares drawn uniformly (device 0 first)."""
        self.energy = np.array(self.cfg.energy_capacity, dtype=np.int64)
        self.cpu = np.array(
            [self.rng.integers(0, f + 1) for f in self.cfg.max_cpu_shares], dtype=np.int64
        )
        return self.state_index

    def step(self, a: int):
        """Apply action index ``a``; returns ``(next_state_index, reward)``."""
        t = self.tables
        if not t.mask(self.state_index)[a]:
            raise InfeasibleActionError(f"action {a} infeasible in state {self.state}")
        self.cpu, self.energy = _advance(self.cfg, self.energy, t.action_e[a], self.rng)
        return self.state_index, float(t.grid_reward[a])
