import math

import numpy as np
import pytest

from mcml.baselines import (
    InstanceTooLargeError,
    QTable,
    TabularConfig,
    bellman_residual,
    discounted_return,
    greedy_action,
    random_action,
    tabular_q_learning,
    value_iteration,
    write_policy_csv,
    write_q_csv,
)
from mcml.env import (
    Config,
    DeviceState,
    SystemState,
    action_index,
    device_feasible,
    index_action,
    index_state,
    reward,
    state_index,
    tables,
    transition_distribution,
)

CFG = Config()
TINY = Config(num_devices=1, max_data=2, energy_capacity=2, max_cpu_shares=2)
PAIR = Config(num_devices=2, max_data=2, energy_capacity=2, max_cpu_shares=2)


def dense_value_iteration(cfg, tol=1e-12, offset=0.0):
    """Reference solver built only from transition_distribution and reward."""
    t = tables(cfg)
    S = t.num_states
    model = []
    for s in range(S):
        state = index_state(s, cfg)
        rows = []
        for a in t.feasible_indices(s):
            act = index_action(int(a), cfg)
            nxt = transition_distribution(state, act, cfg)
            idx = np.array([state_index(ns, cfg) for ns, _ in nxt])
            p = np.array([q for _, q in nxt])
            rows.append((int(a), reward(state, act, cfg) + offset, idx, p))
        model.append(rows)
    v = np.zeros(S)
    while True:
        q = [[r + cfg.discount * p @ v[idx] for _, r, idx, p in rows] for rows in model]
        v_new = np.array([max(row) for row in q])
        if np.max(np.abs(v_new - v)) < tol:
            policy = np.array([model[s][int(np.argmax(q[s]))][0] for s in range(S)])
            return v_new, policy
        v = v_new


class TestGreedy:
    def test_examples(self):
        cfg = Config(num_devices=1)
        assert greedy_action(SystemState.of((2, 3)), cfg).pairs == ((3, 3),)
        assert greedy_action(SystemState.of((1, 3)), cfg).pairs == ((3, 1),)
        assert greedy_action(SystemState.of((0, 3)), cfg).pairs == ((0, 0),)

    def test_closed_form_when_full_data_feasible(self):
        cfg = Config(num_devices=1)
        for f in range(4):
            for c in range(4):
                d, e = greedy_action(SystemState.of((f, c)), cfg).pairs[0]
                cap = math.floor(cfg.switched_capacitance * cfg.cycles_per_data_unit * 3
                                 * (cfg.cpu_share_hz * f) ** 2 / cfg.energy_unit_joules)
                if min(c, cap) >= 1:
                    assert (d, e) == (3, min(c, cap))
                else:
                    assert (d, e) == (0, 0)

    def test_dominance_every_device_state(self):
        cfg = Config(num_devices=1)
        for f in range(4):
            for c in range(4):
                dev = DeviceState(f, c)
                d, e = greedy_action(SystemState((dev,)), cfg).pairs[0]
                assert device_feasible(dev, d, e, cfg)
                for dd in range(4):
                    for ee in range(4):
                        if device_feasible(dev, dd, ee, cfg):
                            assert dd <= d
                            if dd == d:
                                assert ee <= e

    def test_feasible_on_all_states(self):
        t = tables(CFG)
        for s in range(t.num_states):
            a = greedy_action(index_state(s, CFG), CFG)
            assert t.mask(s)[action_index(a, CFG)]


class TestRandom:
    def test_singleton(self):
        cfg = Config(num_devices=1)
        rng = np.random.default_rng(0)
        for _ in range(100):
            assert random_action(SystemState.of((0, 0)), rng, cfg).pairs == ((0, 0),)

    def test_uniform_over_device_options(self):
        cfg = Config(num_devices=1)
        rng = np.random.default_rng(1)
        n = 10_000
        counts = {}
        for _ in range(n):
            p = random_action(SystemState.of((2, 1)), rng, cfg).pairs[0]
            counts[p] = counts.get(p, 0) + 1
        assert set(counts) == {(0, 0), (1, 1), (2, 1), (3, 1)}
        sigma = math.sqrt(0.25 * 0.75 / n)
        for c in counts.values():
            assert abs(c / n - 0.25) <= 3 * sigma

    def test_always_feasible(self):
        rng = np.random.default_rng(2)
        t = tables(CFG)
        for s in rng.integers(0, t.num_states, 500):
            state = index_state(int(s), CFG)
            a = random_action(state, rng, CFG)
            for n, (dev, (d, e)) in enumerate(zip(state.devices, a.pairs)):
                assert device_feasible(dev, d, e, CFG, device=n)


class TestValueIteration:
    def test_myopic(self):
        cfg = CFG.replace(discount=0.0)
        res = value_iteration(cfg)
        t = tables(cfg)
        for s in range(0, t.num_states, 37):
            feas = t.feasible_indices(s)
            assert res.values[s] == pytest.approx(t.grid_reward[feas].max())
            assert res.policy[s] == feas[np.argmax(t.grid_reward[feas])]

    def test_no_cpu_states_are_zero_when_myopic(self):
        cfg = CFG.replace(discount=0.0)
        res = value_iteration(cfg)
        s = state_index(SystemState.of((0, 3), (0, 1), (0, 0)), cfg)
        assert res.values[s] == 0.0
        assert res.policy[s] == 0

    @pytest.mark.parametrize("cfg", [TINY, PAIR])
    def test_matches_dense_reference(self, cfg):
        res = value_iteration(cfg, 1e-12)
        v, policy = dense_value_iteration(cfg)
        np.testing.assert_allclose(res.values, v, atol=1e-9)
        np.testing.assert_array_equal(res.policy, policy)

    def test_bellman_residual(self):
        res = value_iteration(TINY, 1e-9)
        assert bellman_residual(res.values, TINY) < 1e-8

    def test_full_instance_residual(self):
        res = value_iteration(CFG, 1e-9)
        assert bellman_residual(res.values, CFG) < 1e-8
        assert tables(CFG).mask_table[np.arange(CFG.num_states), res.policy].all()

    def test_contraction(self):
        d = np.array(value_iteration(CFG, 1e-10).deltas)
        assert (d[1:] <= CFG.discount * d[:-1] + 1e-12).all()

    def test_shift_invariance(self):
        base = value_iteration(PAIR, 1e-12)
        shifted = value_iteration(PAIR, 1e-12, reward_offset=0.37)
        np.testing.assert_allclose(shifted.values - base.values, 0.37 / (1 - PAIR.discount), atol=1e-8)
        np.testing.assert_array_equal(shifted.policy, base.policy)
        rv, rp = dense_value_iteration(PAIR, offset=0.37)
        np.testing.assert_allclose(shifted.values, rv, atol=1e-8)

    def test_degenerate_weights_give_idle_policy(self):
        # equal unit weights: no participating round pays for its latency
        res = value_iteration(CFG.replace(reward_weights=(1, 1, 1)), 1e-10)
        assert not res.policy.any()
        np.testing.assert_allclose(res.values, 0.0, atol=1e-12)


class TestTabular:
    def test_zero_learning_rate(self):
        q = tabular_q_learning(TINY, TabularConfig(episodes=5, learning_rate=0.0))
        assert not q.values.any()
        assert q.visits.sum() == 500

    def test_single_visit_collapse(self):
        cfg = TINY.replace(discount=0.0)
        q = tabular_q_learning(cfg, TabularConfig(episodes=1, iterations=1, learning_rate=1.0))
        s, a = np.argwhere(q.visits == 1)[0]
        assert q.values[s, a] == tables(cfg).grid_reward[a]
        assert np.count_nonzero(q.values) <= 1

    def test_converges_to_value_iteration(self):
        vi = value_iteration(TINY, 1e-12)
        q = tabular_q_learning(TINY, TabularConfig(episodes=5000, seed=3))
        m = tables(TINY).mask_table
        err = np.max(np.abs(q.values - vi.q_values)[m]) / np.max(np.abs(vi.q_values[m]))
        assert err < 0.05
        np.testing.assert_array_equal(q.greedy_policy(), vi.policy)

    def test_deterministic(self):
        a = tabular_q_learning(TINY, TabularConfig(episodes=50, seed=7))
        b = tabular_q_learning(TINY, TabularConfig(episodes=50, seed=7))
        np.testing.assert_array_equal(a.values, b.values)

    def test_epsilon_zero_still_feasible(self):
        q = tabular_q_learning(PAIR, TabularConfig(episodes=20, epsilon=0.0))
        assert not (q.visits[~tables(PAIR).mask_table]).any()

    def test_too_large(self):
        with pytest.raises(InstanceTooLargeError):
            QTable(CFG)

    def test_python_path_matches_compiled(self):
        from mcml import kernels

        t = tables(TINY)
        rng = np.random.default_rng(0)
        arrivals = rng.poisson(2.0, size=(300, 1))
        cpu = rng.integers(0, 3, size=(300, 1))
        u = rng.random((2, 300))
        outs = []
        for fn in (kernels.q_learning_loop, kernels.q_learning_loop.py_func):
            q = np.zeros((9, 9))
            visits = np.zeros((9, 9), dtype=np.int64)
            fn(q, visits, t.mask_table, t.grid_reward, t.action_e, t.state_energy, t.state_radix,
               np.array([2]), 8, arrivals, cpu, u[0], u[1], 0.5, 0.9, 0.7, -1.0)
            outs.append(q)
        np.testing.assert_array_equal(outs[0], outs[1])


class TestRollouts:
    def test_optimal_policy_return_matches_value(self):
        vi = value_iteration(TINY, 1e-12)
        ret = discounted_return(vi.policy, TINY, rollouts=2000, horizon=200, seed=1)
        start = [state_index(SystemState.of((f, 2)), TINY) for f in range(3)]
        v0 = vi.values[start].mean()
        assert abs(ret.mean() - v0) < 4 * ret.std() / math.sqrt(ret.size)


class TestExport:
    def test_q_csv(self, tmp_path):
        vi = value_iteration(TINY)
        path = tmp_path / "q.csv"
        write_q_csv(path, vi.q_values, tables(TINY).mask_table)
        lines = path.read_text().splitlines()
        assert lines[0] == "state,action,value"
        assert len(lines) == 1 + tables(TINY).mask_table.sum()

    def test_policy_csv(self, tmp_path):
        vi = value_iteration(TINY)
        path = tmp_path / "v.csv"
        write_policy_csv(path, vi.values, vi.policy)
        rows = [l.split(",") for l in path.read_text().splitlines()[1:]]
        assert [int(r[1]) for r in rows] == vi.policy.tolist()
        np.testing.assert_allclose([float(r[2]) for r in rows], vi.values, rtol=1e-9)
