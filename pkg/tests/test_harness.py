import json

import numpy as np
import pytest

from sopac import cli
from sopac.autodiff import ParamSet
from sopac.envs import SwitchGame
from sopac.harness import (
    METRICS_HEADER,
    ConfigError,
    RunConfig,
    aggregate,
    eval_grid,
    evaluate,
    read_metrics,
    run_experiment,
    write_aggregate,
)
from sopac.policy import ActorConfig, actor_init


def small_config(**overrides):
    base = dict(env="switch", algo="centralv", sop="off", batch_size=2,
                total_steps=40, eval_interval=20, eval_episodes=2, seed=0)
    base.update(overrides)
    return RunConfig(**base)


class TestRunConfig:
    def test_defaults_are_reference_values(self):
        cfg = RunConfig()
        assert cfg.lam == 0.8 and cfg.gamma == 0.99
        assert cfg.lr == 0.005 and cfg.rms_alpha == 0.99 and cfg.rms_eps == 1e-5
        assert cfg.target_period == 200
        assert cfg.eps_start == 0.5 and cfg.eps_end == 0.01
        assert cfg.eps_anneal_steps == 100_000
        assert cfg.critic_hidden == (128, 128) and cfg.gru_hidden == 64

    def test_validation_reports_all_problems(self):
        with pytest.raises(ConfigError, match="algo"):
            RunConfig(algo="dqn")
        with pytest.raises(ConfigError, match="batch_size"):
            RunConfig(batch_size=0)
        with pytest.raises(ConfigError, match="eval_interval"):
            RunConfig(eval_interval=0)

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            RunConfig.from_dict({"learning_rate": 0.1})

    def test_hash_is_stable_and_sensitive(self):
        a, b = RunConfig(seed=1), RunConfig(seed=1)
        assert a.sha256() == b.sha256()
        assert RunConfig(seed=2).sha256() != a.sha256()


class TestEvalGrid:
    def test_divisible_grid(self):
        assert eval_grid(100, 25) == [25, 50, 75, 100]

    def test_ragged_grid_has_ceil_rows(self):
        assert eval_grid(25, 10) == [10, 20, 25]
        assert len(eval_grid(25, 10)) == -(-25 // 10)

    def test_interval_larger_than_total(self):
        assert eval_grid(5, 10) == [5]


class TestEvaluate:
    def _optimal_actor(self, env):
        cfg = ActorConfig(env.spec.obs_width, 2, env.spec.n_actions, gru_hidden=8)
        params = actor_init(np.random.default_rng(0), cfg)
        zeroed = ParamSet({k: np.zeros_like(v.data) for k, v in params.items()})
        zeroed["fc2.b0"].data[:] = [0.0, 0.0, 5.0]  # argmax picks action 2
        return zeroed, cfg

    def test_optimal_policy_wins_every_episode(self):
        env = SwitchGame()
        params, cfg = self._optimal_actor(env)
        win_rate, mean_return = evaluate(params, cfg, env, episodes=16, seed=0)
        assert win_rate == 1.0
        assert mean_return == pytest.approx(1.0)

    def test_uniform_actor_sampling_matches_combinatorics(self):
        env = SwitchGame()
        cfg = ActorConfig(env.spec.obs_width, 2, env.spec.n_actions, gru_hidden=8)
        params = actor_init(np.random.default_rng(1), cfg)
        uniform = ParamSet({k: np.zeros_like(v.data) for k, v in params.items()})
        episodes = 10_000
        win_rate, _ = evaluate(uniform, cfg, env, episodes=episodes, seed=5, mode="sample")
        p = 1.0 / 9.0
        se = np.sqrt(p * (1 - p) / episodes)
        assert abs(win_rate - p) < 3.0 * se

    def test_evaluation_is_pure(self):
        env = SwitchGame()
        params, cfg = self._optimal_actor(env)
        before = params.copy()
        first = evaluate(params, cfg, env, episodes=8, seed=9)
        second = evaluate(params, cfg, env, episodes=8, seed=9)
        assert first == second
        assert params.equals(before)


class TestRunExperiment:
    def test_metrics_header_is_the_pinned_contract(self, tmp_path):
        result = run_experiment(small_config(), tmp_path / "r")
        first_line = result.metrics_path.read_text().splitlines()[0]
        assert first_line == METRICS_HEADER
        assert first_line == ("step,episodes,train_return,test_win_rate,test_return,"
                              "max_buffer_kl,mean_buffer_kl,critic_loss,policy_loss,"
                              "epsilon,seconds")

    def test_row_count_is_ceil_steps_over_interval(self, tmp_path):
        result = run_experiment(small_config(total_steps=25, eval_interval=10),
                                tmp_path / "r")
        assert len(result.rows) == 3
        assert [r["step"] for r in result.rows] == [10, 20, 25]

    def test_step_column_is_monotone_and_win_rate_bounded(self, tmp_path):
        result = run_experiment(small_config(total_steps=60), tmp_path / "r")
        steps = [r["step"] for r in result.rows]
        assert steps == sorted(steps)
        assert all(0.0 <= r["test_win_rate"] <= 1.0 for r in result.rows)

    def test_same_config_and_seed_reproduce_identical_bytes(self, tmp_path):
        cfg = small_config(sop="permissive", batch_size=3, seed=7)
        a = run_experiment(cfg, tmp_path / "a")
        b = run_experiment(cfg, tmp_path / "b")
        assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()

    def test_off_policy_mode_equals_permissive_with_unit_batch(self, tmp_path):
        base = dict(env="switch", algo="centralv", batch_size=1, total_steps=60,
                    eval_interval=20, eval_episodes=2, seed=3)
        off = run_experiment(RunConfig(sop="off", **base), tmp_path / "off")
        perm = run_experiment(RunConfig(sop="permissive", **base), tmp_path / "perm")
        assert off.metrics_path.read_bytes() == perm.metrics_path.read_bytes()

    def test_strict_with_infinite_threshold_equals_permissive(self, tmp_path):
        base = dict(env="switch", algo="coma-cc", batch_size=3, total_steps=40,
                    eval_interval=20, eval_episodes=2, seed=4)
        perm = run_experiment(RunConfig(sop="permissive", **base), tmp_path / "p")
        strict = run_experiment(RunConfig(sop="strict", **base), tmp_path / "s")
        assert strict.metrics_path.read_bytes() == perm.metrics_path.read_bytes()

    def test_manifest_records_config_hash_and_counters(self, tmp_path):
        cfg = small_config()
        result = run_experiment(cfg, tmp_path / "r")
        manifest = json.loads(result.manifest_path.read_text())
        assert manifest["config_sha256"] == cfg.sha256()
        assert manifest["rows"] == len(result.rows)
        assert manifest["env_steps"] >= cfg.total_steps
        assert result.params_path.exists()

    def test_capture_environment_runs_all_algorithms(self, tmp_path):
        for algo in ("centralv", "coma", "coma-cc"):
            cfg = RunConfig(env="capture", algo=algo, sop="permissive", batch_size=2,
                            total_steps=60, eval_interval=30, eval_episodes=2, seed=1,
                            env_config={"side": 4, "horizon": 8})
            result = run_experiment(cfg, tmp_path / algo)
            assert len(result.rows) == 2


class TestAggregate:
    def _write(self, tmp_path, name, win_rates, steps=(10, 20)):
        rows = []
        for step, rate in zip(steps, win_rates):
            rows.append({
                "step": step, "episodes": step, "train_return": 0.0,
                "test_win_rate": rate, "test_return": 0.0, "max_buffer_kl": 0.0,
                "mean_buffer_kl": 0.0, "critic_loss": 0.0, "policy_loss": 0.0,
                "epsilon": 0.5, "seconds": 0.0,
            })
        path = tmp_path / name
        lines = [METRICS_HEADER]
        for row in rows:
            lines.append(",".join(str(row[c]) for c in METRICS_HEADER.split(",")))
        path.write_text("\n".join(lines) + "\n")
        return path

    def test_single_seed_degenerates_to_identity(self, tmp_path):
        path = self._write(tmp_path, "a.csv", [0.25, 0.75])
        rows = aggregate([path])
        assert rows[0]["win_rate_median"] == 0.25
        assert rows[0]["win_rate_q25"] == rows[0]["win_rate_q75"] == 0.25

    def test_linear_interpolation_quantile(self, tmp_path):
        paths = [
            self._write(tmp_path, f"{i}.csv", [rate, rate])
            for i, rate in enumerate([0.0, 0.5, 1.0, 1.0])
        ]
        rows = aggregate(paths)
        assert rows[0]["win_rate_median"] == pytest.approx(0.75)
        assert rows[0]["win_rate_q25"] <= rows[0]["win_rate_median"] <= rows[0]["win_rate_q75"]

    def test_constant_columns_aggregate_to_the_constant(self, tmp_path):
        paths = [self._write(tmp_path, f"{i}.csv", [0.4, 0.4]) for i in range(3)]
        rows = aggregate(paths)
        for row in rows:
            assert row["win_rate_median"] == row["win_rate_q25"] == row["win_rate_q75"] == 0.4

    def test_permutation_invariance(self, tmp_path):
        paths = [
            self._write(tmp_path, f"{i}.csv", [rate, rate])
            for i, rate in enumerate([0.1, 0.9, 0.4])
        ]
        assert aggregate(paths) == aggregate(list(reversed(paths)))

    def test_misaligned_grids_rejected_with_row_report(self, tmp_path):
        a = self._write(tmp_path, "a.csv", [0.1, 0.2], steps=(10, 20))
        b = self._write(tmp_path, "b.csv", [0.1, 0.2], steps=(10, 30))
        with pytest.raises(ValueError, match="row 1"):
            aggregate([a, b])

    def test_write_aggregate_roundtrip(self, tmp_path):
        paths = [self._write(tmp_path, "a.csv", [0.5, 0.5])]
        out = tmp_path / "agg.csv"
        write_aggregate(out, aggregate(paths))
        assert out.read_text().splitlines()[0] == "step,win_rate_median,win_rate_q25,win_rate_q75"


class TestCli:
    def test_train_smoke_and_exit_zero(self, tmp_path, capsys):
        code = cli.main([
            "train", "--env", "switch", "--algo", "centralv", "--sop", "off",
            "--batch-size", "2", "--seed", "0", "--total-steps", "40",
            "--eval-interval", "20", "--out", str(tmp_path / "run"),
        ])
        assert code == 0
        assert (tmp_path / "run" / "metrics.csv").exists()
        assert "final:" in capsys.readouterr().out

    def test_cli_overrides_config_file(self, tmp_path):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({
            "env": "switch", "algo": "coma-cc", "sop": "off", "batch_size": 2,
            "total_steps": 60, "eval_interval": 20, "eval_episodes": 2,
        }))
        code = cli.main([
            "train", "--config", str(config), "--total-steps", "40",
            "--out", str(tmp_path / "run"),
        ])
        assert code == 0
        rows = read_metrics(tmp_path / "run" / "metrics.csv")
        assert [r["step"] for r in rows] == [20, 40]

    def test_config_error_exits_two(self, tmp_path, capsys):
        code = cli.main([
            "train", "--env", "switch", "--batch-size", "0",
            "--out", str(tmp_path / "run"),
        ])
        assert code == 2
        assert "config error" in capsys.readouterr().err

    def test_unknown_config_key_exits_two(self, tmp_path):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"learning": 1}))
        assert cli.main(["train", "--config", str(config),
                         "--out", str(tmp_path / "run")]) == 2

    def test_numeric_failure_exits_three(self, tmp_path, capsys):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({
            "env": "switch", "algo": "centralv", "sop": "off", "batch_size": 2,
            "total_steps": 40, "eval_interval": 20, "eval_episodes": 2,
            "lr": 1e200,
        }))
        with np.errstate(all="ignore"):
            code = cli.main(["train", "--config", str(config),
                             "--out", str(tmp_path / "run")])
        assert code == 3
        assert "numeric failure" in capsys.readouterr().err

    def test_aggregate_subcommand(self, tmp_path):
        for seed in (0, 1):
            cli.main([
                "train", "--env", "switch", "--sop", "off", "--batch-size", "2",
                "--seed", str(seed), "--total-steps", "40", "--eval-interval", "20",
                "--out", str(tmp_path / f"s{seed}"),
            ])
        out = tmp_path / "agg.csv"
        code = cli.main([
            "aggregate", "--runs", str(tmp_path / "s0"), str(tmp_path / "s1"),
            "--out", str(out),
        ])
        assert code == 0 and out.exists()

    def test_aggregate_misaligned_exits_two(self, tmp_path):
        cli.main(["train", "--env", "switch", "--sop", "off", "--batch-size", "2",
                  "--total-steps", "40", "--eval-interval", "20",
                  "--out", str(tmp_path / "a")])
        cli.main(["train", "--env", "switch", "--sop", "off", "--batch-size", "2",
                  "--total-steps", "60", "--eval-interval", "20",
                  "--out", str(tmp_path / "b")])
        code = cli.main(["aggregate", "--runs", str(tmp_path / "a"),
                         str(tmp_path / "b"), "--out", str(tmp_path / "agg.csv")])
        assert code == 2

    def test_grad_check_subcommand(self, capsys):
        assert cli.main(["grad-check", "--seeds", "2"]) == 0
        out = capsys.readouterr().out
        assert "actor" in out and "ok" in out

    def test_every_train_flag_has_a_config_file_equivalent(self, tmp_path):
        # each train flag's dest is a RunConfig field, so the same setting
        # can come from the JSON file; the run must accept all of them at once
        flag_fields = {
            "env": "switch", "algo": "coma", "sop": "permissive",
            "critic_schedule": "minibatch", "batch_size": 3,
            "kl_threshold": 2.5, "gamma_adv_one": False, "seed": 9,
            "total_steps": 40, "eval_interval": 20,
        }
        assert set(flag_fields) <= set(RunConfig.__dataclass_fields__)
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({**flag_fields, "eval_episodes": 2}))
        code = cli.main(["train", "--config", str(config),
                         "--out", str(tmp_path / "run")])
        assert code == 0
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        for key, value in flag_fields.items():
            assert manifest["config"][key] == value
