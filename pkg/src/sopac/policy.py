"""Shared-parameter recurrent actor with epsilon-floor exploration.

All agents run the same network: a linear layer with ReLU, a GRU cell, and a
linear output head. Per-agent behaviour differs only through the inputs,
which concatenate the local observation, the agent's previous action as a
one-hot, and the agent's one-hot id.

The acting distribution masks unavailable actions, softmaxes the remaining
logits, and mixes in a uniform floor: pi = (1 - eps) * softmax + eps / k over
the k available actions. Masked actions keep probability exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

Array = np.ndarray


class MaskError(ValueError):
    """No action is available under the supplied mask."""


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 0.5
    end: float = 0.01
    anneal_steps: int = 100_000

    def __post_init__(self) -> None:
        if not self.start >= self.end >= 0.0:
            raise ValueError(f"need start >= end >= 0, got {self}")
        if self.anneal_steps < 1:
            raise ValueError("anneal_steps must be positive")


def epsilon_at(t: int, schedule: EpsilonSchedule) -> float:
    """Linear interpolation from start to end, clamped after anneal_steps."""
    if t < 0:
        raise ValueError("time step must be nonnegative")
    frac = min(t / schedule.anneal_steps, 1.0)
    return schedule.start + (schedule.end - schedule.start) * frac


@dataclass(frozen=True)
class ActorConfig:
    obs_width: int
    n_agents: int
    n_actions: int
    gru_hidden: int = 64

    @property
    def input_width(self) -> int:
        return self.obs_width + self.n_actions + self.n_agents


def actor_init(rng: np.random.Generator, cfg: ActorConfig) -> ParamSet:
    fc1 = ad.mlp_init(rng, (cfg.input_width, cfg.gru_hidden), prefix="fc1.")
    gru = ad.gru_init(rng, cfg.gru_hidden, cfg.gru_hidden, prefix="gru.")
    fc2 = ad.mlp_init(rng, (cfg.gru_hidden, cfg.n_actions), prefix="fc2.")
    return ad.merge(fc1, gru, fc2)


def actor_cell(params: ParamSet, x, h) -> tuple[Tensor, Tensor]:
    """One recurrent step: returns (logits, next hidden) for stacked rows."""
    z = ad.relu(ad.mlp_forward(params, x, prefix="fc1."))
    h_next = ad.gru_step(params, z, h, prefix="gru.")
    logits = ad.mlp_forward(params, h_next, prefix="fc2.")
    return logits, h_next


def masked_epsilon_probs(logits, avail: Array, epsilon) -> Tensor:
    """Mix the masked softmax with a uniform floor over available actions.

    ``logits`` is (k, m); ``avail`` is a (k, m) 0/1 array; ``epsilon`` is a
    scalar or (k, 1) array. Unavailable actions come out exactly zero.
    """
    avail = np.asarray(avail, dtype=np.float64)
    counts = avail.sum(axis=-1, keepdims=True)
    if (counts < 1.0).any():
        raise MaskError("a row masks out every action")
    logits_data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    # Stop-gradient shift; softmax is invariant to it, so gradients are exact.
    shift = np.max(np.where(avail > 0.0, logits_data, -np.inf), axis=-1, keepdims=True)
    z = ad.mul(ad.exp(ad.mul(ad.sub(logits, shift), avail)), avail)
    soft = ad.div(z, ad.sum_last(z))
    eps = np.asarray(epsilon, dtype=np.float64)
    return ad.add(ad.mul(soft, 1.0 - eps), (eps / counts) * avail)


class AgentHistory:
    """One agent's running input record and recurrent state within an episode."""

    def __init__(self, cfg: ActorConfig, agent_id: int):
        self.cfg = cfg
        self.agent_id = agent_id
        self.inputs: list[Array] = []
        self.hidden: Array = np.zeros((1, cfg.gru_hidden), dtype=np.float64)

    def observe(self, obs: Array, prev_action: int | None) -> None:
        self.inputs.append(
            build_actor_input(self.cfg, obs, prev_action, self.agent_id)
        )

    def advance(self, params: ParamSet) -> None:
        """Consume the latest input, stepping the recurrent state."""
        with ad.no_grad():
            _, h = actor_cell(params, self.inputs[-1][None, :], self.hidden)
        self.hidden = h.data

    def __len__(self) -> int:
        return len(self.inputs)


def build_actor_input(
    cfg: ActorConfig, obs: Array, prev_action: int | None, agent_id: int
) -> Array:
    prev = np.zeros(cfg.n_actions, dtype=np.float64)
    if prev_action is not None:
        prev[prev_action] = 1.0
    ident = np.zeros(cfg.n_agents, dtype=np.float64)
    ident[agent_id] = 1.0
    return np.concatenate([np.asarray(obs, dtype=np.float64), prev, ident])


def policy_distribution(
    params: ParamSet,
    history: AgentHistory,
    avail: Array,
    epsilon: float,
) -> Array:
    """Action probabilities at the history's latest step; does not advance it."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if not history.inputs:
        raise ValueError("history holds no observations yet")
    with ad.no_grad():
        logits, _ = actor_cell(params, history.inputs[-1][None, :], history.hidden)
        probs = masked_epsilon_probs(logits, np.asarray(avail, dtype=np.float64)[None, :], epsilon)
    return probs.data[0]


def select_action(dist: Array, mode: str, rng: np.random.Generator | None = None) -> int:
    """Greedy argmax (ties break to the lowest index) or a seeded sample."""
    dist = np.asarray(dist, dtype=np.float64)
    if mode == "greedy":
        return int(np.argmax(dist))
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs a generator")
        return int(rng.choice(dist.size, p=dist / dist.sum()))
    raise ValueError(f"unknown selection mode {mode!r}")


@dataclass(frozen=True)
class PolicySnapshot:
    """Provenance of an episode: stored per-step distributions or frozen params.

    The stored-distribution form is the default (it is exact and O(T*n*m));
    the frozen-parameter form replays the network on the recorded histories.
    """

    generation: int
    dists: Array | None = None          # (T, n_agents, n_actions)
    params: ParamSet | None = None
    actor_cfg: ActorConfig | None = None

    def __post_init__(self) -> None:
        if self.dists is None and self.params is None:
            raise ValueError("snapshot needs stored distributions or parameters")


def evaluate_policy_on_episode(snapshot: PolicySnapshot, episode) -> Array:
    """Distributions the snapshot assigns at every recorded history.

    Recomputation uses the epsilon in force at recording time, stored per
    step in the episode. Episodes without the stored epsilon trace are
    rejected.
    """
    if getattr(episode, "epsilons", None) is None:
        raise ValueError("episode is missing its stored epsilon trace")
    if snapshot.dists is not None:
        return np.array(snapshot.dists, dtype=np.float64, copy=True)
    assert snapshot.params is not None and snapshot.actor_cfg is not None
    return replay_distributions(snapshot.params, snapshot.actor_cfg, episode)


def replay_distributions(params: ParamSet, cfg: ActorConfig, episode) -> Array:
    """Run the actor over an episode's recorded inputs; (T, n, m) probabilities."""
    length = episode.length
    n = cfg.n_agents
    out = np.zeros((length, n, cfg.n_actions), dtype=np.float64)
    hidden: Tensor | Array = np.zeros((n, cfg.gru_hidden), dtype=np.float64)
    with ad.no_grad():
        for t in range(length):
            rows = np.stack(
                [
                    build_actor_input(
                        cfg,
                        episode.obs[t, a],
                        int(episode.actions[t - 1, a]) if t > 0 else None,
                        a,
                    )
                    for a in range(n)
                ]
            )
            logits, hidden = actor_cell(params, rows, hidden)
            probs = masked_epsilon_probs(
                logits, episode.avail[t].astype(np.float64), float(episode.epsilons[t])
            )
            out[t] = probs.data
    return out
