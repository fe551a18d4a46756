"""Return targets, advantages, and the actor/critic update rules.

Episodes are padded into batches whose padded steps contribute exactly zero
to every loss and gradient. Critic targets are lambda-mixtures of n-step
bootstrapped returns computed from a periodically synced target network,
with the finite-episode convention that all n-step returns reaching past the
terminal collapse onto the Monte-Carlo return (so lambda = 1 is exactly the
discounted return and lambda = 0 is exactly the one-step target).

Two critic training schedules are provided: ``minibatch`` takes one
optimiser step per timestep, sweeping t = T..1 with targets fixed up front,
and ``wholebatch`` accumulates the gradient over all timesteps and takes a
single step. Each optimiser step (minibatch) or training iteration
(wholebatch) advances the target-network counter.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import critic as cr
from .autodiff import NumericError, OptimizerState, ParamSet, Tensor
from .policy import ActorConfig, actor_cell, actor_init, masked_epsilon_probs

Array = np.ndarray


# ---------------------------------------------------------------------------
# Trajectory containers


@dataclass
class Episode:
    """One trajectory with everything needed to retrain or re-evaluate it."""

    states: Array        # (T, state_width)
    obs: Array           # (T, n_agents, obs_width)
    avail: Array         # (T, n_agents, n_actions) 0/1
    actions: Array       # (T, n_agents) int
    rewards: Array       # (T,)
    dists: Array         # (T, n_agents, n_actions) acting distributions
    epsilons: Array      # (T,) exploration floor in force at each step
    generation: int
    terminal: bool = True
    win: bool = False

    @property
    def length(self) -> int:
        return self.states.shape[0]

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())

    def validate(self) -> None:
        t = self.length
        for name in ("obs", "avail", "actions", "rewards", "dists", "epsilons"):
            if getattr(self, name).shape[0] != t:
                raise ValueError(f"episode field {name} does not span {t} steps")
        sums = self.dists.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ValueError("stored distributions do not sum to 1")


@dataclass
class Batch:
    """Episodes padded to a common length; ``pad`` is 1 on real steps."""

    episodes: list[Episode]
    states: Array        # (B, T, state_width)
    obs: Array           # (B, T, n, obs_width)
    avail: Array         # (B, T, n, m) float
    actions: Array       # (B, T, n) int
    rewards: Array       # (B, T)
    dists: Array         # (B, T, n, m)
    epsilons: Array      # (B, T)
    pad: Array           # (B, T) float
    lengths: Array       # (B,) int

    @property
    def size(self) -> int:
        return len(self.episodes)

    @property
    def max_length(self) -> int:
        return self.states.shape[1]

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode]) -> "Batch":
        if not episodes:
            raise ValueError("cannot batch zero episodes")
        b = len(episodes)
        t_max = max(e.length for e in episodes)
        _, n, m = episodes[0].dists.shape
        s_w = episodes[0].states.shape[1]
        z_w = episodes[0].obs.shape[2]
        states = np.zeros((b, t_max, s_w))
        obs = np.zeros((b, t_max, n, z_w))
        avail = np.ones((b, t_max, n, m))  # padded rows stay all-available
        actions = np.zeros((b, t_max, n), dtype=np.int64)
        rewards = np.zeros((b, t_max))
        dists = np.zeros((b, t_max, n, m))
        epsilons = np.zeros((b, t_max))
        pad = np.zeros((b, t_max))
        lengths = np.zeros(b, dtype=np.int64)
        for i, e in enumerate(episodes):
            t = e.length
            states[i, :t] = e.states
            obs[i, :t] = e.obs
            avail[i, :t] = e.avail
            actions[i, :t] = e.actions
            rewards[i, :t] = e.rewards
            dists[i, :t] = e.dists
            epsilons[i, :t] = e.epsilons
            pad[i, :t] = 1.0
            lengths[i] = t
        return cls(list(episodes), states, obs, avail, actions, rewards,
                   dists, epsilons, pad, lengths)


# ---------------------------------------------------------------------------
# Returns and targets


def n_step_return(rewards: Sequence[float], bootstrap: float, gamma: float, n: int) -> float:
    """n-step bootstrapped return from the front of a reward tail.

    ``rewards`` holds the rewards remaining from the step in question. When
    fewer than n remain, the episode ends inside the window: the sum
    truncates at the terminal step and the bootstrap term is dropped.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rewards = np.asarray(rewards, dtype=np.float64)
    steps = min(n, rewards.size)
    total = 0.0
    for i in range(steps):
        total += (gamma ** i) * rewards[i]
    if n <= rewards.size:
        total += (gamma ** n) * bootstrap
    return total


def td_lambda_targets(rewards: Array, boot_values: Array, lam: float, gamma: float) -> Array:
    """Lambda-mixture of n-step returns for one finite episode.

    ``boot_values[t]`` is the target-network value at step t, used when an
    n-step return bootstraps there. Weights of returns reaching past the
    terminal collapse onto the Monte-Carlo return, computed by the backward
    recursion  y[t] = r[t] + gamma * ((1 - lam) * boot[t + 1] + lam * y[t + 1]).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    rewards = np.asarray(rewards, dtype=np.float64)
    boot = np.asarray(boot_values, dtype=np.float64)
    if boot.shape[0] != rewards.shape[0]:
        raise ValueError("need one target-network value per step")
    t_len = rewards.shape[0]
    out = np.zeros_like(boot)
    out[t_len - 1] = rewards[t_len - 1]
    for t in range(t_len - 2, -1, -1):
        out[t] = rewards[t] + gamma * ((1.0 - lam) * boot[t + 1] + lam * out[t + 1])
    return out


def batch_td_lambda_targets(batch: Batch, boots: Array, lam: float, gamma: float) -> Array:
    """Per-episode targets over a padded batch; padded steps are zero.

    ``boots`` may carry trailing agent dimensions; rewards broadcast across
    them.
    """
    out = np.zeros_like(boots)
    for i, length in enumerate(batch.lengths):
        length = int(length)
        rewards = batch.rewards[i, :length]
        if boots.ndim > 2:
            rewards = rewards.reshape(length, *([1] * (boots.ndim - 2)))
            rewards = np.broadcast_to(rewards, (length, *boots.shape[2:]))
        out[i, :length] = td_lambda_targets(rewards, boots[i, :length], lam, gamma)
    return out


# ---------------------------------------------------------------------------
# Advantages


def centralv_advantage(reward: float, v_now: float, v_next: float,
                       gamma_adv: float, terminal: bool) -> float:
    """Shared temporal-difference advantage; terminal steps bootstrap zero."""
    future = 0.0 if terminal else gamma_adv * v_next
    return reward + future - v_now


def counterfactual_baseline(dist: Array, q_row: Array) -> float:
    """Policy-weighted value over one agent's alternative actions."""
    dist = np.asarray(dist, dtype=np.float64)
    q_row = np.asarray(q_row, dtype=np.float64)
    if dist.shape != q_row.shape:
        raise ValueError(f"distribution {dist.shape} vs Q row {q_row.shape}")
    return float(np.dot(dist, q_row))


def coma_advantage(table: cr.CounterfactualQTable, dists: Array) -> Array:
    """Per-agent advantage: taken-action value minus the counterfactual baseline."""
    dists = np.asarray(dists, dtype=np.float64)
    if dists.shape != table.values.shape:
        raise ValueError(f"dists {dists.shape} vs table {table.values.shape}")
    taken = table.taken_values()
    baselines = np.einsum("am,am->a", dists, table.values)
    return taken - baselines


# ---------------------------------------------------------------------------
# Target network bookkeeping


@dataclass(frozen=True)
class TargetNetState:
    params: ParamSet
    counter: int = 0
    period: int = 200


def target_sync(state: TargetNetState, online: ParamSet) -> TargetNetState:
    """Copy online parameters into the target when the counter reaches the period."""
    if state.counter >= state.period:
        return TargetNetState(online.copy(), 0, state.period)
    return state


def _tick_target(state: TargetNetState, online: ParamSet) -> TargetNetState:
    return target_sync(replace(state, counter=state.counter + 1), online)


# ---------------------------------------------------------------------------
# Batched network inputs


def actor_step_inputs(batch: Batch, cfg: ActorConfig) -> Array:
    """(T, B*n, input_width) actor inputs, rows ordered episode-major."""
    b, t_max, n, m = batch.dists.shape
    ids = np.tile(np.eye(n), (b, 1))
    out = np.zeros((t_max, b * n, cfg.input_width))
    for t in range(t_max):
        obs_rows = batch.obs[:, t].reshape(b * n, -1)
        prev = np.zeros((b, n * m)) if t == 0 else cr.joint_one_hot(batch.actions[:, t - 1], m)
        prev_rows = prev.reshape(b, n, m)[:, :, :].reshape(b * n, m)
        out[t] = np.concatenate([obs_rows, prev_rows, ids], axis=1)
    return out


def unroll_policy(params: ParamSet, cfg: ActorConfig, batch: Batch) -> list[Tensor]:
    """Per-step acting distributions over the batch, honouring stored epsilons.

    Runs in the caller's gradient mode: wrap in ``autodiff.no_grad()`` when
    the probabilities are wanted as constants.
    """
    b, t_max, n, m = batch.dists.shape
    inputs = actor_step_inputs(batch, cfg)
    eps_rows = np.repeat(batch.epsilons, n, axis=0).reshape(b, n, t_max)
    hidden: Tensor | Array = np.zeros((b * n, cfg.gru_hidden))
    probs: list[Tensor] = []
    for t in range(t_max):
        logits, hidden = actor_cell(params, inputs[t], hidden)
        avail_t = batch.avail[:, t].reshape(b * n, m)
        eps_t = eps_rows[:, :, t].reshape(b * n, 1)
        probs.append(masked_epsilon_probs(logits, avail_t, eps_t))
    return probs


def batch_policy_probs(params: ParamSet, cfg: ActorConfig, batch: Batch) -> Array:
    """(B, T, n, m) current-policy probabilities as plain arrays."""
    b, t_max, n, m = batch.dists.shape
    with ad.no_grad():
        probs = unroll_policy(params, cfg, batch)
    return np.stack([p.data.reshape(b, n, m) for p in probs], axis=1)


def critic_batch_inputs(batch: Batch, algo: str) -> Array:
    """Per-step critic inputs: (B,T,W) for centralv/coma-cc, (B,T,n,W) for coma."""
    b, t_max, n, m = batch.dists.shape
    if algo == "centralv":
        return batch.states
    prev = np.zeros((b, t_max, n * m))
    prev[:, 1:] = cr.joint_one_hot(batch.actions[:, :-1], m)
    now = cr.joint_one_hot(batch.actions, m)
    if algo == "coma-cc":
        flat_obs = batch.obs.reshape(b, t_max, -1)
        return np.concatenate([batch.states, flat_obs, prev, now], axis=-1)
    if algo == "coma":
        parts = []
        state_rep = np.broadcast_to(batch.states[:, :, None, :], (b, t_max, n, batch.states.shape[-1]))
        prev_rep = np.broadcast_to(prev[:, :, None, :], (b, t_max, n, n * m))
        masked = np.stack([cr.mask_own_block(now, a, m) for a in range(n)], axis=2)
        ids = np.broadcast_to(np.eye(n), (b, t_max, n, n))
        return np.concatenate([state_rep, batch.obs, prev_rep, masked, ids], axis=-1)
    raise ValueError(f"unknown algorithm {algo!r}")


def comacc_counterfactual_batch_inputs(batch: Batch) -> Array:
    """(B, T, n, m, W) inputs varying one agent's action per row."""
    b, t_max, n, m = batch.dists.shape
    base = critic_batch_inputs(batch, "coma-cc")
    w = base.shape[-1]
    out = np.broadcast_to(base[:, :, None, None, :], (b, t_max, n, m, w)).copy()
    joint_off = w - n * m  # current joint action occupies the final block
    for a in range(n):
        block = slice(joint_off + a * m, joint_off + (a + 1) * m)
        out[:, :, a, :, block] = np.eye(m)
    return out


def _critic_values(params: ParamSet, inputs: Array, actions: Array | None) -> Tensor:
    """Forward critic inputs with any leading shape; gather per-agent actions
    for the m-headed critic when ``actions`` is given."""
    lead = inputs.shape[:-1]
    out = cr.critic_forward(params, inputs.reshape(-1, inputs.shape[-1]))
    if actions is None:
        return out  # (prod(lead), 1)
    return ad.gather_last(out, actions.reshape(-1))


def critic_bootstrap_values(target: ParamSet, batch: Batch, algo: str) -> Array:
    """Target-network values used when an n-step return bootstraps at a step."""
    inputs = critic_batch_inputs(batch, algo)
    with ad.no_grad():
        if algo == "coma":
            vals = _critic_values(target, inputs, batch.actions).data
            return vals.reshape(batch.size, batch.max_length, -1)
        vals = _critic_values(target, inputs, None).data
    return vals.reshape(batch.size, batch.max_length)


# ---------------------------------------------------------------------------
# Critic updates


def critic_loss_tensor(params: ParamSet, inputs: Array, targets: Array,
                       weights: Array, actions: Array | None) -> Tensor:
    """Weighted squared error between fixed targets and critic predictions."""
    pred = _critic_values(params, inputs, actions)
    diff = ad.sub(targets.reshape(-1, 1), pred)
    return ad.sum_all(ad.mul(ad.square(diff), weights.reshape(-1, 1)))


def prepare_critic_batch(batch: Batch, algo: str, target: TargetNetState,
                         lam: float, gamma: float):
    """Assemble (inputs, targets, weights, actions) for critic training."""
    inputs = critic_batch_inputs(batch, algo)
    boots = critic_bootstrap_values(target.params, batch, algo)
    targets = batch_td_lambda_targets(batch, boots, lam, gamma)
    if algo == "coma":
        weights = np.broadcast_to(batch.pad[:, :, None], targets.shape).copy()
        actions: Array | None = batch.actions
    else:
        weights = batch.pad
        actions = None
    return inputs, targets, weights, actions


def critic_update_wholebatch(
    batch: Batch, algo: str, params: ParamSet, opt: OptimizerState,
    target: TargetNetState, lam: float, gamma: float,
    lr: float = 0.005, alpha: float = 0.99, eps: float = 1e-5,
) -> tuple[ParamSet, OptimizerState, TargetNetState, float]:
    """Accumulate the squared-error gradient over every timestep, then step once."""
    inputs, targets, weights, actions = prepare_critic_batch(batch, algo, target, lam, gamma)
    params.zero_grads()
    loss = critic_loss_tensor(params, inputs, targets, weights, actions)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError("critic loss is not finite")
    loss.backward()
    new_params, new_opt = ad.rmsprop_step(params, params.grad_set(), opt, lr, alpha, eps)
    return new_params, new_opt, _tick_target(target, new_params), value


def critic_update_minibatch(
    batch: Batch, algo: str, params: ParamSet, opt: OptimizerState,
    target: TargetNetState, lam: float, gamma: float,
    lr: float = 0.005, alpha: float = 0.99, eps: float = 1e-5,
) -> tuple[ParamSet, OptimizerState, TargetNetState, float]:
    """One optimiser step per timestep, sweeping t = T..1.

    Targets are computed once from the target network before the sweep; the
    target counter advances on every optimiser step.
    """
    inputs, targets, weights, actions = prepare_critic_batch(batch, algo, target, lam, gamma)
    total = 0.0
    for t in range(batch.max_length - 1, -1, -1):
        params.zero_grads()
        step_actions = actions[:, t] if actions is not None else None
        loss = critic_loss_tensor(params, inputs[:, t], targets[:, t], weights[:, t], step_actions)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError("critic loss is not finite")
        total += value
        loss.backward()
        params, opt = ad.rmsprop_step(params, params.grad_set(), opt, lr, alpha, eps)
        target = _tick_target(target, params)
    return params, opt, target, total


# ---------------------------------------------------------------------------
# Advantage computation (online critic, current policy probabilities)


def compute_advantages(
    batch: Batch, algo: str, critic_params: ParamSet,
    actor_params: ParamSet, actor_cfg: ActorConfig,
    gamma: float, gamma_adv_one: bool,
) -> Array:
    """(B, T, n) advantages; padded steps come out exactly zero."""
    b, t_max, n, m = batch.dists.shape
    if algo == "centralv":
        inputs = critic_batch_inputs(batch, algo)
        with ad.no_grad():
            values = _critic_values(critic_params, inputs, None).data.reshape(b, t_max)
        gamma_adv = 1.0 if gamma_adv_one else gamma
        adv = np.zeros((b, t_max))
        for i, length in enumerate(batch.lengths):
            length = int(length)
            for t in range(length):
                v_next = values[i, t + 1] if t + 1 < length else 0.0
                adv[i, t] = centralv_advantage(
                    batch.rewards[i, t], values[i, t], v_next,
                    gamma_adv, terminal=t + 1 >= length,
                )
        return np.broadcast_to(adv[:, :, None], (b, t_max, n)).copy()

    cur_dists = batch_policy_probs(actor_params, actor_cfg, batch)
    if algo == "coma":
        inputs = critic_batch_inputs(batch, algo)
        with ad.no_grad():
            rows = _critic_values(critic_params, inputs, None).data.reshape(b, t_max, n, m)
    elif algo == "coma-cc":
        inputs = comacc_counterfactual_batch_inputs(batch)
        with ad.no_grad():
            rows = _critic_values(critic_params, inputs, None).data.reshape(b, t_max, n, m)
    else:
        raise ValueError(f"unknown algorithm {algo!r}")
    taken = np.take_along_axis(rows, batch.actions[..., None], axis=-1)[..., 0]
    baseline = np.einsum("btam,btam->bta", cur_dists, rows)
    return (taken - baseline) * batch.pad[:, :, None]


# ---------------------------------------------------------------------------
# Policy update


def policy_loss_tensor(batch: Batch, advantages: Array, params: ParamSet,
                       cfg: ActorConfig) -> Tensor:
    """-sum over valid (t, a) of log pi(u_t^a | tau_t^a) * A, padding-masked."""
    b, t_max, n, m = batch.dists.shape
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.shape != (b, t_max, n):
        raise ValueError(f"advantages shape {advantages.shape} != {(b, t_max, n)}")
    probs = unroll_policy(params, cfg, batch)
    pad_rows = np.repeat(batch.pad, n, axis=0).reshape(b, n, t_max)
    total: Tensor | None = None
    for t in range(t_max):
        taken = batch.actions[:, t].reshape(-1)
        p = ad.gather_last(probs[t], taken)
        pad_t = pad_rows[:, :, t].reshape(b * n, 1)
        p_safe = ad.add(ad.mul(p, pad_t), 1.0 - pad_t)  # padded rows read log(1) = 0
        weight = (advantages[:, t, :].reshape(b * n, 1)) * pad_t
        term = ad.sum_all(ad.mul(ad.log(p_safe), weight))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, -1.0)


def policy_gradient_update(
    batch: Batch, advantages: Array, params: ParamSet, cfg: ActorConfig,
    opt: OptimizerState,
    lr: float = 0.005, alpha: float = 0.99, eps: float = 1e-5,
) -> tuple[ParamSet, OptimizerState, float]:
    """One optimiser step on the policy-gradient loss.

    Advantages enter as constants; no gradient reaches the critic. A
    non-finite loss raises without touching the parameters.
    """
    params.zero_grads()
    loss = policy_loss_tensor(batch, advantages, params, cfg)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError("policy loss is not finite")
    loss.backward()
    new_params, new_opt = ad.rmsprop_step(params, params.grad_set(), opt, lr, alpha, eps)
    return new_params, new_opt, value


# ---------------------------------------------------------------------------
# Trainer glue


@dataclass(frozen=True)
class LearnConfig:
    algo: str
    critic_schedule: str = "wholebatch"
    lam: float = 0.8
    gamma: float = 0.99
    gamma_adv_one: bool = True
    lr: float = 0.005
    rms_alpha: float = 0.99
    rms_eps: float = 1e-5
    target_period: int = 200

    def __post_init__(self) -> None:
        if self.algo not in ("centralv", "coma", "coma-cc"):
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if self.critic_schedule not in ("minibatch", "wholebatch"):
            raise ValueError(f"unknown critic schedule {self.critic_schedule!r}")


def critic_input_width(algo: str, state_width: int, obs_width: int, n: int, m: int) -> int:
    if algo == "centralv":
        return cr.centralv_layout(state_width).width
    if algo == "coma":
        return cr.coma_layout(state_width, obs_width, n, m).width
    if algo == "coma-cc":
        return cr.comacc_layout(state_width, obs_width, n, m).width
    raise ValueError(f"unknown algorithm {algo!r}")


@dataclass
class Trainer:
    """Actor/critic parameter bundle with the per-iteration update recipe."""

    cfg: LearnConfig
    actor_cfg: ActorConfig
    actor: ParamSet
    actor_opt: OptimizerState
    critic: ParamSet
    critic_opt: OptimizerState
    target: TargetNetState

    @classmethod
    def create(
        cls, cfg: LearnConfig, actor_cfg: ActorConfig, state_width: int,
        actor_rng: np.random.Generator, critic_rng: np.random.Generator,
        critic_hidden: Sequence[int] = (128, 128),
    ) -> "Trainer":
        actor = actor_init(actor_rng, actor_cfg)
        in_width = critic_input_width(
            cfg.algo, state_width, actor_cfg.obs_width,
            actor_cfg.n_agents, actor_cfg.n_actions,
        )
        out_width = actor_cfg.n_actions if cfg.algo == "coma" else 1
        critic = cr.critic_init(critic_rng, in_width, out_width, critic_hidden)
        return cls(
            cfg=cfg,
            actor_cfg=actor_cfg,
            actor=actor,
            actor_opt=ad.rmsprop_init(actor),
            critic=critic,
            critic_opt=ad.rmsprop_init(critic),
            target=TargetNetState(critic.copy(), 0, cfg.target_period),
        )

    def train_on_batch(self, episodes: Sequence[Episode]) -> tuple[float, float]:
        """Critic first, then actor, one optimiser step each; returns losses."""
        batch = Batch.from_episodes(episodes)
        update = (critic_update_minibatch if self.cfg.critic_schedule == "minibatch"
                  else critic_update_wholebatch)
        self.critic, self.critic_opt, self.target, critic_loss = update(
            batch, self.cfg.algo, self.critic, self.critic_opt, self.target,
            self.cfg.lam, self.cfg.gamma,
            self.cfg.lr, self.cfg.rms_alpha, self.cfg.rms_eps,
        )
        advantages = compute_advantages(
            batch, self.cfg.algo, self.critic, self.actor, self.actor_cfg,
            self.cfg.gamma, self.cfg.gamma_adv_one,
        )
        self.actor, self.actor_opt, policy_loss = policy_gradient_update(
            batch, advantages, self.actor, self.actor_cfg, self.actor_opt,
            self.cfg.lr, self.cfg.rms_alpha, self.cfg.rms_eps,
        )
        return critic_loss, policy_loss
