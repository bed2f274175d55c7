import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcml import cli
from mcml.config import ConfigError, ExperimentSpec, apply_overrides, dump_spec, load_spec, parse_text
from mcml.ddqn import AgentConfig
from mcml.env import Config
from mcml.harness import (
    MetricRow,
    converged,
    emit_csv,
    monotone_within_se,
    moving_average,
    read_csv,
    run_experiment,
    run_quality_sweep,
    summarize,
)

SHORT = AgentConfig(episodes=10, iterations=20, hidden=(8,))


def spec(**kw):
    base = dict(agent=SHORT, seeds=(0, 1))
    base.update(kw)
    return ExperimentSpec(**base)


class TestConfigFormat:
    def test_round_trip_defaults(self):
        s = ExperimentSpec()
        assert load_spec(None, parse_text(dump_spec(s))) == s

    def test_round_trip_edited(self, tmp_path):
        s = apply_overrides(
            ExperimentSpec(),
            {"env.data_quality": (2.0, 1.0, 1.0), "agent.hidden": (16,), "experiment.seeds": (3, 4),
             "tabular.learning_rate": 0.1, "experiment.output": "out.csv", "sweep.values": (1.0, 2.0)},
        )
        path = tmp_path / "exp.cfg"
        path.write_text(dump_spec(s))
        back = load_spec(path)
        assert back == s
        assert dump_spec(back) == dump_spec(s)

    def test_file_values(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text(
            "# comment\n\nenv.num_devices = 2\nenv.data_quality.1 = 2.5   # trailing\n"
            "agent.episodes = 7\nexperiment.scheme = greedy\nexperiment.seeds = 5\n"
        )
        s = load_spec(path)
        assert s.env.num_devices == 2 and s.env.data_quality == (2.5, 1.0)
        assert s.agent.episodes == 7 and s.scheme == "greedy" and s.seeds == (5,)

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("agent.episodes = 7\n")
        assert load_spec(path, {"agent.episodes": 3}).agent.episodes == 3

    def test_discount_kept_in_step(self):
        s = load_spec(None, {"env.discount": 0.5})
        assert s.env.discount == s.agent.discount == 0.5

    @pytest.mark.parametrize(
        "values",
        [{"env.nope": 1}, {"experiment.scheme": "bogus"}, {"env.max_data": 0}, {"experiment.seeds": ()},
         {"env.data_quality.9": 1.0}, {"agent.batch_size": 0}, {"experiment.window": 0}, {"what": 1}],
    )
    def test_invalid(self, values):
        with pytest.raises(ConfigError):
            load_spec(None, values)

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            parse_text("env.num_devices 3\n")

    @given(
        st.lists(st.floats(0.1, 10, allow_nan=False), min_size=3, max_size=3),
        st.floats(0, 5, allow_nan=False),
        st.lists(st.integers(0, 10**6), min_size=1, max_size=4, unique=True),
    )
    @settings(max_examples=40, deadline=None)
    def test_round_trip_property(self, eta, rate, seeds):
        s = apply_overrides(
            ExperimentSpec(),
            {"env.data_quality": tuple(eta), "env.arrival_rate": rate, "experiment.seeds": tuple(seeds)},
        )
        assert load_spec(None, parse_text(dump_spec(s))) == s


class TestRunExperiment:
    def test_greedy_deterministic(self):
        s = spec(scheme="greedy", seeds=(3,))
        a, b = run_experiment(s), run_experiment(s)
        assert len(a) == 10 and a == b

    def test_random_energy_bounds(self):
        rows = run_experiment(spec(scheme="random"))
        e_max = Config().normalizers[2]
        assert all(0 < r.energy <= e_max for r in rows)

    @pytest.mark.parametrize("scheme", ["ddqn", "greedy", "random"])
    def test_replicate_isolation(self, scheme):
        alone = run_experiment(spec(scheme=scheme, seeds=(1,)))
        both = run_experiment(spec(scheme=scheme, seeds=(0, 1)))
        assert [r for r in both if r.seed == 1] == alone

    def test_same_environment_stream(self, monkeypatch):
        # exogenous draws do not depend on the actions, so every scheme
        # meets the same episode start states
        from mcml.env import MCMLEnv

        seen = {}
        orig = MCMLEnv.reset
        for scheme in ("ddqn", "greedy", "random"):
            starts = seen.setdefault(scheme, [])

            def reset(self, _starts=starts):
                s = orig(self)
                _starts.append(s)
                return s

            monkeypatch.setattr(MCMLEnv, "reset", reset)
            run_experiment(spec(scheme=scheme, seeds=(4,)))
        assert seen["ddqn"] == seen["greedy"] == seen["random"]
        assert len(seen["ddqn"]) == 10

    def test_tabular_on_small_instance(self):
        s = load_spec(None, {"env.num_devices": 1, "env.max_data": 2, "env.energy_capacity": 2,
                             "env.max_cpu_shares": 2, "tabular.episodes": 20, "experiment.scheme": "tabular",
                             "agent.episodes": 4})
        rows = run_experiment(s)
        assert len(rows) == 4 and all(len(r.data_units) == 1 for r in rows)

    def test_parallel_matches_serial(self):
        s = spec(scheme="random", seeds=(0, 1, 2))
        assert sorted(run_experiment(s.replace(jobs=2))) == sorted(run_experiment(s))

    def test_checkpoint(self, tmp_path):
        from mcml.nn import QNetwork

        run_experiment(spec(seeds=(2,)), checkpoint_dir=str(tmp_path))
        net = QNetwork.load(tmp_path / "ddqn_seed2.bin")
        assert net.sizes == (6, 8, 4096)


class TestSweep:
    def test_needs_two_devices(self):
        with pytest.raises(ConfigError):
            run_quality_sweep(spec(env=Config(num_devices=1)))

    def test_shape_and_labels(self):
        s = spec(scheme="greedy", sweep_values=(1.0, 3.0))
        res = run_quality_sweep(s)
        assert res.data_units.shape == (2, 2, 3)
        assert {r.scheme for r in res.rows} == {"greedy[env.data_quality.1=1]", "greedy[env.data_quality.1=3]"}
        # greedy ignores quality weights
        np.testing.assert_array_equal(res.data_units[0], res.data_units[1])

    def test_symmetric_point(self):
        res = run_quality_sweep(spec(scheme="greedy", sweep_values=(1.0,), agent=AgentConfig(episodes=40)))
        d = res.mean()[0]
        assert d.max() <= 1.1 * d.min()


class TestMonotone:
    def test_strict(self):
        assert monotone_within_se([1, 2, 3], [0, 0, 0], True)
        assert not monotone_within_se([1, 2, 3], [0, 0, 0], False)

    def test_within_pooled_error(self):
        assert monotone_within_se([1.0, 0.9], [0.06, 0.08], True)
        assert not monotone_within_se([1.0, 0.85], [0.06, 0.08], True)


class TestSummaries:
    def test_moving_average(self):
        np.testing.assert_allclose(moving_average([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
        np.testing.assert_allclose(moving_average([5.0] * 7, 50), 5.0)

    def test_converged_uses_final_fifth(self):
        rows = [MetricRow("x", 0, e, float(e), 0, 0, 0, (0.0,)) for e in range(10)]
        assert converged(rows)[("x", 0)]["reward"] == 8.5

    def test_summarize(self):
        rows = [MetricRow("x", s, e, float(s), 1.0, 2.0, 3.0, (1.0,)) for s in (0, 1) for e in range(5)]
        (summary,) = summarize(rows, window=3)
        assert summary.mean["reward"] == 0.5 and summary.standard_error["reward"] == pytest.approx(0.5)
        assert summary.smoothed_final["energy"] == 1.0


def row(scheme="ddqn", seed=0, episode=0, **kw):
    vals = dict(reward=-0.123456789, energy=2.0, latency=31.5, data=1.0 / 3, data_units=(1.0, 2.0, 3.0))
    vals.update(kw)
    return MetricRow(scheme, seed, episode, **vals)


class TestCSV:
    def test_empty(self, tmp_path):
        p = tmp_path / "a.csv"
        emit_csv([], p, num_devices=3)
        assert p.read_text() == "scheme,seed,episode,reward,energy,latency,data,d_1,d_2,d_3\n"

    def test_one_row(self, tmp_path):
        p = tmp_path / "a.csv"
        emit_csv([row()], p)
        lines = p.read_text().splitlines()
        assert len(lines) == 2
        assert lines[1] == "ddqn,0,0,-0.123457,2,31.5,0.333333,1,2,3"

    def test_sorted_and_byte_identical(self, tmp_path):
        rows = [row("random", 1, 0), row("ddqn", 2, 1), row("ddqn", 2, 0), row("ddqn", 10, 0)]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        emit_csv(rows, a)
        emit_csv(list(reversed(rows)), b)
        assert a.read_bytes() == b.read_bytes()
        keys = [tuple(l.split(",")[:3]) for l in a.read_text().splitlines()[1:]]
        assert keys == [("ddqn", "2", "0"), ("ddqn", "2", "1"), ("ddqn", "10", "0"), ("random", "1", "0")]

    def test_read_back(self, tmp_path):
        p = tmp_path / "a.csv"
        rows = run_experiment(spec(scheme="greedy"))
        emit_csv(rows, p)
        back = read_csv(p)
        assert len(back) == len(rows)
        for r, q in zip(sorted(rows), back):
            assert q.energy == pytest.approx(r.energy, rel=1e-5)


class TestCLI:
    def test_run_greedy(self, tmp_path, capsys):
        out = tmp_path / "g.csv"
        code = cli.main(["run", "--scheme", "greedy", "--seeds", "0-2", "--episodes", "3", "--output", str(out)])
        assert code == 0
        assert len(out.read_text().splitlines()) == 1 + 9

    def test_config_file_and_flags(self, tmp_path):
        cfgf = tmp_path / "c.cfg"
        cfgf.write_text("experiment.scheme = random\nagent.episodes = 9\nagent.iterations = 5\n")
        out = tmp_path / "r.csv"
        assert cli.main(["run", "--config", str(cfgf), "--episodes", "2", "--output", str(out)]) == 0
        assert {l.split(",")[0] for l in out.read_text().splitlines()[1:]} == {"random"}
        assert len(out.read_text().splitlines()) == 3

    def test_compare(self, tmp_path, capsys):
        out = tmp_path / "c.csv"
        code = cli.main(["compare", "--seeds", "0", "--episodes", "2", "--set", "agent.iterations=40",
                         "--set", "agent.hidden=8", "--output", str(out)])
        assert code == 0
        assert {l.split(",")[0] for l in out.read_text().splitlines()[1:]} == {"ddqn", "greedy", "random"}
        assert "energy below greedy" in capsys.readouterr().out

    def test_sweep(self, capsys):
        assert cli.main(["sweep", "--scheme", "greedy", "--seeds", "0,1", "--episodes", "2",
                         "--set", "sweep.values=1,2"]) == 0
        assert "nondecreasing" in capsys.readouterr().out
        assert cli.main(["run", "--sweep", "--scheme", "greedy", "--seeds", "0", "--episodes", "1",
                         "--set", "sweep.values=1,2"]) == 0

    def test_oracle(self, tmp_path, capsys):
        prefix = str(tmp_path / "o")
        assert cli.main(["oracle", "--tabular-episodes", "200", "--rollouts", "20", "--output", prefix]) == 0
        assert (tmp_path / "o_policy.csv").read_text().startswith("state,action,value\n")
        assert len((tmp_path / "o_policy.csv").read_text().splitlines()) == 10

    def test_gradcheck(self, capsys):
        assert cli.main(["gradcheck", "--nets", "3"]) == 0
        assert "PASS" in capsys.readouterr().out

    @pytest.mark.parametrize(
        "argv",
        [["run", "--scheme", "bogus"], ["run", "--set", "env.max_data=0"], ["run", "--set", "nonsense"],
         ["run", "--scheme", "tabular", "--episodes", "1"], ["run", "--config", "/no/such/file"],
         ["sweep", "--set", "env.num_devices=1", "--episodes", "1"]],
    )
    def test_invalid_input_nonzero(self, argv, capsys):
        assert cli.main(argv) != 0
        assert "error" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["frobnicate"])
        assert exc.value.code != 0
