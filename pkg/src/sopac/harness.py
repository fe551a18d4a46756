"""Experiment runner: configuration, seeded orchestration, metrics, aggregation.

A run is fully determined by (config, seed): parameter initialisation, every
rollout, and every evaluation draw their randomness from fixed-purpose
seed-sequence keys, and the metrics CSV is written with deterministic
formatting so two identical runs produce byte-identical files.

Evaluation rows land on the fixed environment-step grid
``[k, 2k, ..., total]`` (k = eval interval), checked after every training
update. Emitting right after the update, before any eviction or fresh
sampling, makes the on-policy loop with batch size 1 and the permissive
semi-on-policy loop produce identical traces, which is tested.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autodiff import ParamSet
from .envs import make_env
from .learn import LearnConfig, Trainer
from .policy import ActorConfig, EpsilonSchedule, epsilon_at
from .rollout import rollout_episode, sample_episode_fn
from .sop import ReplayBuffer, max_buffer_kl, permissive_sop_iteration, strict_sop_iteration, warm_fill

Array = np.ndarray

METRICS_HEADER = (
    "step,episodes,train_return,test_win_rate,test_return,"
    "max_buffer_kl,mean_buffer_kl,critic_loss,policy_loss,epsilon,seconds"
)

ENVS = ("switch", "capture")
ALGOS = ("centralv", "coma", "coma-cc")
SOP_MODES = ("off", "permissive", "strict")
SCHEDULES = ("minibatch", "wholebatch")


class ConfigError(ValueError):
    """Invalid run configuration; reported before any work starts."""


@dataclass(frozen=True)
class RunConfig:
    """Full experiment description; defaults follow the reference setup."""

    env: str = "switch"
    env_config: dict = field(default_factory=dict)
    algo: str = "centralv"
    sop: str = "permissive"
    critic_schedule: str = "wholebatch"
    batch_size: int = 8
    lam: float = 0.8
    gamma: float = 0.99
    gamma_adv_one: bool = True
    lr: float = 0.005
    rms_alpha: float = 0.99
    rms_eps: float = 1e-5
    target_period: int = 200
    eps_start: float = 0.5
    eps_end: float = 0.01
    eps_anneal_steps: int = 100_000
    kl_threshold: float = float("inf")
    total_steps: int = 20_000
    eval_interval: int = 1_000
    eval_episodes: int = 32
    seed: int = 0
    record_timing: bool = False
    gru_hidden: int = 64
    critic_hidden: tuple[int, ...] = (128, 128)

    def __post_init__(self) -> None:
        problems = []
        if self.env not in ENVS:
            problems.append(f"env must be one of {ENVS}, got {self.env!r}")
        if self.algo not in ALGOS:
            problems.append(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if self.sop not in SOP_MODES:
            problems.append(f"sop must be one of {SOP_MODES}, got {self.sop!r}")
        if self.critic_schedule not in SCHEDULES:
            problems.append(f"critic-schedule must be one of {SCHEDULES}")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.eval_interval < 1:
            problems.append("eval_interval must be positive")
        if self.eval_episodes < 1:
            problems.append("eval_episodes must be positive")
        if self.total_steps < 1:
            problems.append("total_steps must be positive")
        if not 0.0 <= self.lam <= 1.0:
            problems.append("lambda must lie in [0, 1]")
        if self.kl_threshold < 0.0:
            problems.append("kl_threshold must be nonnegative")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "critic_hidden" in data:
            data["critic_hidden"] = tuple(data["critic_hidden"])
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        data = asdict(self)
        data["critic_hidden"] = list(self.critic_hidden)
        data["kl_threshold"] = (
            "inf" if np.isinf(self.kl_threshold) else self.kl_threshold
        )
        return data

    def sha256(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path: str | Path) -> dict:
    try:
        with open(path) as handle:
            data = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def eval_grid(total_steps: int, interval: int) -> list[int]:
    """Fixed row grid [k, 2k, ...] capped at total_steps; ceil(S/k) entries."""
    grid = list(range(interval, total_steps + 1, interval))
    if not grid or grid[-1] != total_steps:
        grid.append(total_steps)
    return grid


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(
    actor: ParamSet, actor_cfg: ActorConfig, env, episodes: int, seed: int,
    mode: str = "greedy",
) -> tuple[float, float]:
    """Win rate and mean return over evaluation rollouts.

    Greedy by default (argmax action selection, exploration off); sampling
    mode draws from the policy instead. Evaluation owns its seed stream and
    never touches the actor or any training generator.
    """
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    wins = 0
    returns = []
    for i in range(episodes):
        seq = np.random.SeedSequence(seed, spawn_key=(2, i))
        env_seed, action_seed = (int(s) for s in seq.generate_state(2))
        episode = rollout_episode(
            env, actor, actor_cfg, EpsilonSchedule(0.0, 0.0, 1),
            env_steps_done=0, env_seed=env_seed,
            action_rng=np.random.default_rng(action_seed),
            generation=-1, mode=mode,
        )
        wins += int(episode.win)
        returns.append(episode.total_return)
    return wins / episodes, float(np.mean(returns))


# ---------------------------------------------------------------------------
# Experiment loop


@dataclass
class RunResult:
    out_dir: Path
    metrics_path: Path
    manifest_path: Path
    params_path: Path
    rows: list[dict]


def build_trainer(cfg: RunConfig, env) -> Trainer:
    actor_cfg = ActorConfig(
        obs_width=env.spec.obs_width,
        n_agents=env.spec.n_agents,
        n_actions=env.spec.n_actions,
        gru_hidden=cfg.gru_hidden,
    )
    learn_cfg = LearnConfig(
        algo=cfg.algo,
        critic_schedule=cfg.critic_schedule,
        lam=cfg.lam,
        gamma=cfg.gamma,
        gamma_adv_one=cfg.gamma_adv_one,
        lr=cfg.lr,
        rms_alpha=cfg.rms_alpha,
        rms_eps=cfg.rms_eps,
        target_period=cfg.target_period,
    )
    actor_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0, 0)))
    critic_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0, 1)))
    return Trainer.create(
        learn_cfg, actor_cfg, env.spec.state_width, actor_rng, critic_rng,
        critic_hidden=cfg.critic_hidden,
    )


def run_experiment(cfg: RunConfig, out_dir: str | Path) -> RunResult:
    """Train per the config and emit metrics.csv / manifest.json / params.npz."""
    start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    env = make_env(cfg.env, cfg.env_config)
    eval_env = make_env(cfg.env, cfg.env_config)
    trainer = build_trainer(cfg, env)
    schedule = EpsilonSchedule(cfg.eps_start, cfg.eps_end, cfg.eps_anneal_steps)
    sample = sample_episode_fn(env, trainer.actor_cfg, schedule, cfg.seed)
    grid = eval_grid(cfg.total_steps, cfg.eval_interval)

    rows: list[dict] = []
    pending = {"next": 0}

    def emit(critic_loss: float, policy_loss: float, trained) -> None:
        steps_done = sample.counter["env_steps"]
        while pending["next"] < len(grid) and steps_done >= grid[pending["next"]]:
            idx = pending["next"]
            eval_seq = np.random.SeedSequence(cfg.seed, spawn_key=(3, idx))
            win_rate, test_return = evaluate(
                trainer.actor, trainer.actor_cfg, eval_env,
                cfg.eval_episodes, int(eval_seq.generate_state(1)[0]),
            )
            kl = max_buffer_kl(trainer.actor, trainer.actor_cfg, trained, "exact")
            rows.append({
                "step": grid[idx],
                "episodes": sample.counter["rollouts"],
                "train_return": float(np.mean([e.total_return for e in trained])),
                "test_win_rate": win_rate,
                "test_return": test_return,
                "max_buffer_kl": kl.overall_max,
                "mean_buffer_kl": kl.overall_mean,
                "critic_loss": critic_loss,
                "policy_loss": policy_loss,
                "epsilon": epsilon_at(steps_done, schedule),
                "seconds": round(time.perf_counter() - start, 3) if cfg.record_timing else 0.0,
            })
            pending["next"] += 1

    if cfg.sop == "off":
        while pending["next"] < len(grid):
            episodes = [sample(trainer.actor) for _ in range(cfg.batch_size)]
            critic_loss, policy_loss = trainer.train_on_batch(episodes)
            emit(critic_loss, policy_loss, episodes)
    elif cfg.sop == "permissive":
        buffer = ReplayBuffer(cfg.batch_size)
        warm_fill(buffer, trainer, sample)
        while pending["next"] < len(grid):
            permissive_sop_iteration(
                buffer, trainer, sample,
                on_train_end=lambda c, p: emit(c, p, list(buffer.episodes)),
            )
    else:
        buffer = ReplayBuffer(cfg.batch_size)
        while pending["next"] < len(grid):
            strict_sop_iteration(
                buffer, trainer, sample, cfg.kl_threshold,
                on_train_end=lambda c, p: emit(c, p, list(buffer.episodes)),
            )

    metrics_path = out / "metrics.csv"
    _write_metrics(metrics_path, rows)
    params_path = out / "params.npz"
    _save_params(params_path, trainer)
    manifest_path = out / "manifest.json"
    manifest = {
        "config": cfg.to_dict(),
        "config_sha256": cfg.sha256(),
        "package_version": __version__,
        "environment": f"{cfg.env} {env.config}",
        "episodes": sample.counter["rollouts"],
        "env_steps": sample.counter["env_steps"],
        "rows": len(rows),
        "wall_seconds": round(time.perf_counter() - start, 3),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return RunResult(out, metrics_path, manifest_path, params_path, rows)


def _format_value(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(float(value))


def _write_metrics(path: Path, rows: list[dict]) -> None:
    columns = METRICS_HEADER.split(",")
    lines = [METRICS_HEADER]
    for row in rows:
        lines.append(",".join(_format_value(row[c]) for c in columns))
    path.write_bytes(("\n".join(lines) + "\n").encode())


def _save_params(path: Path, trainer: Trainer) -> None:
    arrays = {f"actor/{k}": v.data for k, v in trainer.actor.items()}
    arrays.update({f"critic/{k}": v.data for k, v in trainer.critic.items()})
    arrays.update({f"target/{k}": v.data for k, v in trainer.target.params.items()})
    np.savez(path, **arrays)


# ---------------------------------------------------------------------------
# Cross-seed aggregation


AGGREGATE_HEADER = "step,win_rate_median,win_rate_q25,win_rate_q75"


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != METRICS_HEADER.split(","):
            raise ValueError(f"{path} does not carry the metrics header")
        return [
            {k: (int(v) if k in ("step", "episodes") else float(v)) for k, v in row.items()}
            for row in reader
        ]


def aggregate(paths: Sequence[str | Path]) -> list[dict]:
    """Per-step median and quartiles of test win rate across seed files.

    Quantiles use linear interpolation. Files must share the step grid.
    """
    if not paths:
        raise ValueError("aggregate needs at least one metrics file")
    tables = [read_metrics(p) for p in paths]
    steps = [row["step"] for row in tables[0]]
    for path, table in zip(paths, tables):
        other = [row["step"] for row in table]
        if other != steps:
            shared = min(len(steps), len(other))
            bad = next((i for i in range(shared) if steps[i] != other[i]), shared)
            raise ValueError(f"{path} step grid diverges at row {bad}")
    out = []
    for i, step in enumerate(steps):
        rates = np.asarray([table[i]["test_win_rate"] for table in tables])
        q25, med, q75 = np.percentile(rates, [25.0, 50.0, 75.0], method="linear")
        out.append({
            "step": step,
            "win_rate_median": float(med),
            "win_rate_q25": float(q25),
            "win_rate_q75": float(q75),
        })
    return out


def write_aggregate(path: str | Path, rows: list[dict]) -> None:
    columns = AGGREGATE_HEADER.split(",")
    lines = [AGGREGATE_HEADER]
    for row in rows:
        lines.append(",".join(_format_value(row[c]) for c in columns))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode())
