"""Verification suites: gradient checking and oracle agreement.

Shared by the CLI subcommands (``grad-check``, ``oracle-check``) and the
acceptance tests. Gradient checks run the real loss code on small random
batches and tiny network widths; central finite differences cost two forward
passes per scalar, so full-size networks would be needlessly slow while
exercising exactly the same code paths.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import critic as cr
from .autodiff import ParamSet
from .envs import SwitchGame
from .learn import (
    Batch,
    Episode,
    LearnConfig,
    Trainer,
    compute_advantages,
    critic_loss_tensor,
    critic_update_wholebatch,
    policy_loss_tensor,
    prepare_critic_batch,
)
from .oracle import exact_action_values, exact_state_values, uniform_policy
from .policy import ActorConfig

Array = np.ndarray

# Small but structurally faithful dimensions for finite-difference checks.
CHECK_DIMS = dict(n=2, m=3, state_width=4, obs_width=3, gru_hidden=6,
                  critic_hidden=(8, 8), batch=2, max_len=3)


def random_episode(rng: np.random.Generator, n: int, m: int, state_width: int,
                   obs_width: int, length: int, generation: int = 0) -> Episode:
    """Synthetic episode with valid masks and stored distributions."""
    avail = np.ones((length, n, m))
    logits = rng.standard_normal((length, n, m))
    dists = np.exp(logits)
    dists /= dists.sum(axis=-1, keepdims=True)
    return Episode(
        states=rng.standard_normal((length, state_width)),
        obs=rng.standard_normal((length, n, obs_width)),
        avail=avail,
        actions=rng.integers(m, size=(length, n)),
        rewards=rng.standard_normal(length),
        dists=dists,
        epsilons=rng.uniform(0.05, 0.5, size=length),
        generation=generation,
    )


def random_batch(rng: np.random.Generator, dims: dict | None = None) -> Batch:
    d = dict(CHECK_DIMS, **(dims or {}))
    lengths = [d["max_len"]] + [
        int(rng.integers(1, d["max_len"] + 1)) for _ in range(d["batch"] - 1)
    ]
    episodes = [
        random_episode(rng, d["n"], d["m"], d["state_width"], d["obs_width"],
                       length, generation=i)
        for i, length in enumerate(lengths)
    ]
    return Batch.from_episodes(episodes)


def _check_trainer(rng: np.random.Generator, algo: str, dims: dict) -> Trainer:
    actor_cfg = ActorConfig(dims["obs_width"], dims["n"], dims["m"], dims["gru_hidden"])
    return Trainer.create(
        LearnConfig(algo=algo), actor_cfg, dims["state_width"],
        np.random.default_rng(rng.integers(2**32)),
        np.random.default_rng(rng.integers(2**32)),
        critic_hidden=dims["critic_hidden"],
    )


def _critic_relu_margin(params: ParamSet, inputs: Array) -> float:
    """Smallest |ReLU preactivation| the critic sees on these inputs."""
    h = inputs.reshape(-1, inputs.shape[-1])
    margin = np.inf
    layer = 0
    while f"w{layer + 1}" in params:
        pre = h @ params[f"w{layer}"].data + params[f"b{layer}"].data
        margin = min(margin, float(np.abs(pre).min()))
        h = np.maximum(pre, 0.0)
        layer += 1
    return margin


def _actor_relu_margin(params: ParamSet, batch: Batch, cfg: ActorConfig) -> float:
    """Smallest |preactivation| of the actor's sole ReLU over the batch."""
    from .learn import actor_step_inputs

    inputs = actor_step_inputs(batch, cfg)
    pre = inputs.reshape(-1, inputs.shape[-1]) @ params["fc1.w0"].data + params["fc1.b0"].data
    return float(np.abs(pre).min())


@dataclass
class GradSuiteResult:
    max_errors: dict[str, float]   # loss name -> worst relative error over seeds

    @property
    def overall(self) -> float:
        return max(self.max_errors.values())


def _well_conditioned(loss, params: ParamSet, margin_ok: bool) -> bool:
    """A draw is checkable when no ReLU kink sits inside the probe interval
    and no analytic gradient falls in the finite-difference noise dead zone
    (small enough to drown in roundoff, large enough not to be structural)."""
    if not margin_ok:
        return False
    params.zero_grads()
    loss(params).backward()
    for _, tensor in params.items():
        g = np.abs(tensor.grad) if tensor.grad is not None else None
        if g is not None and np.any((g > 1e-11) & (g < 5e-7)):
            return False
    return True


def gradient_suite(seeds: int = 20, step: float = 1e-5, dims: dict | None = None) -> GradSuiteResult:
    """Finite-difference checks for the actor loss and all three critic losses.

    Central differences cannot certify a gradient across a ReLU kink or below
    their own roundoff floor, so draws with kink-straddling preactivations or
    dead-zone gradient entries are redrawn before checking.
    """
    d = dict(CHECK_DIMS, **(dims or {}))
    margin = 100.0 * step
    worst = {"actor": 0.0, "centralv": 0.0, "coma": 0.0, "coma-cc": 0.0}
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        batch = random_batch(rng, d)
        for algo in ("centralv", "coma", "coma-cc"):
            for _ in range(200):
                trainer = _check_trainer(rng, algo, d)
                inputs, targets, weights, actions = prepare_critic_batch(
                    batch, algo, trainer.target, lam=0.8, gamma=0.99)

                def critic_loss(params: ParamSet) -> ad.Tensor:
                    return critic_loss_tensor(params, inputs, targets, weights, actions)

                adv = compute_advantages(batch, algo, trainer.critic,
                                         trainer.actor, trainer.actor_cfg,
                                         gamma=0.99, gamma_adv_one=False)

                def actor_loss(params: ParamSet) -> ad.Tensor:
                    return policy_loss_tensor(batch, adv, params, trainer.actor_cfg)

                margins_ok = (
                    _critic_relu_margin(trainer.critic, inputs) > margin
                    and _actor_relu_margin(trainer.actor, batch, trainer.actor_cfg) > margin
                )
                if (_well_conditioned(critic_loss, trainer.critic, margins_ok)
                        and _well_conditioned(actor_loss, trainer.actor, True)):
                    break

            report = ad.finite_diff_check(critic_loss, trainer.critic, step)
            worst[algo] = max(worst[algo], report.max_rel_error)
            if algo == "coma-cc":
                report = ad.finite_diff_check(actor_loss, trainer.actor, step)
                worst["actor"] = max(worst["actor"], report.max_rel_error)
    return GradSuiteResult(max_errors=worst)


# ---------------------------------------------------------------------------
# Oracle agreement on the one-shot coordination game


def uniform_switch_episodes(env: SwitchGame, rng: np.random.Generator, count: int,
                            generation: int = 0) -> list[Episode]:
    """Episodes drawn under the fixed uniform policy, with exact stored dists."""
    m = env.spec.n_actions
    episodes = []
    for _ in range(count):
        state, obs, avail = env.reset(0)
        actions = rng.integers(m, size=2)
        result = env.step(actions)
        episodes.append(Episode(
            states=state[None, :],
            obs=obs[None, :, :],
            avail=avail.astype(np.float64)[None, :, :],
            actions=actions[None, :].astype(np.int64),
            rewards=np.asarray([result.reward]),
            dists=np.full((1, 2, m), 1.0 / m),
            epsilons=np.asarray([1.0]),
            generation=generation,
        ))
    return episodes


@dataclass
class OracleCheckResult:
    v_error: float
    q_error: float
    v_updates: int
    q_updates: int

    def passed(self, tol: float = 0.05) -> bool:
        return self.v_error < tol and self.q_error < tol


def switch_oracle_check(
    max_updates: int = 5000, batch: int = 32, seed: int = 7, tol: float = 0.05,
) -> OracleCheckResult:
    """Train the V critic and the consistent Q critic against the exact oracle.

    Whole-batch updates with the reference hyperparameters, fresh uniform
    batches per update, early stop once well inside tolerance.
    """
    env = SwitchGame()
    m = env.spec.n_actions
    v_table = exact_state_values(env, uniform_policy(env))
    q_table = exact_action_values(env, uniform_policy(env))
    v_star = v_table.initial_value
    state = env.state_vector(0)
    obs_all = env.observations(0).reshape(-1)

    results: dict[str, tuple[float, int]] = {}
    for algo in ("centralv", "coma-cc"):
        rng = np.random.default_rng(seed)
        actor_cfg = ActorConfig(env.spec.obs_width, 2, m)
        trainer = Trainer.create(
            LearnConfig(algo=algo), actor_cfg, env.spec.state_width,
            np.random.default_rng(seed + 1), np.random.default_rng(seed + 2),
        )
        error = np.inf
        updates = 0
        for updates in range(1, max_updates + 1):
            episodes = uniform_switch_episodes(env, rng, batch)
            b = Batch.from_episodes(episodes)
            trainer.critic, trainer.critic_opt, trainer.target, _ = critic_update_wholebatch(
                b, algo, trainer.critic, trainer.critic_opt, trainer.target,
                lam=0.8, gamma=0.99,
            )
            if updates % 25 == 0 or updates == max_updates:
                if algo == "centralv":
                    error = abs(cr.v_value(trainer.critic, state) - v_star)
                else:
                    error = max(
                        abs(
                            cr.comacc_q(trainer.critic, state, obs_all, None, joint, m)
                            - q_table.action_values[(0, joint)]
                        )
                        for joint in itertools.product(range(m), repeat=2)
                    )
                if error < 0.6 * tol:
                    break
        results[algo] = (float(error), updates)
    return OracleCheckResult(
        v_error=results["centralv"][0], q_error=results["coma-cc"][0],
        v_updates=results["centralv"][1], q_updates=results["coma-cc"][1],
    )
