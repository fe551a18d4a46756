"""Centralised critics: state-value, per-agent counterfactual, and consistent.

Three critic families share the same MLP trunk (two hidden layers, ReLU) and
differ in input layout and head width:

* ``centralv``: input [state], one output -- V(s).
* ``coma``: per-agent input [state, own obs, previous joint action one-hots,
  current joint action with the agent's own block zeroed, agent id one-hot],
  m outputs -- the agent's counterfactual Q row. Two agents evaluating the
  same joint action generally disagree, because their inputs differ.
* ``coma-cc``: input [state, all observations, previous joint action,
  current joint action], one output -- Q(s, u). Identical joint actions give
  bit-identical estimates no matter which agent asks, and the full n x m
  counterfactual table is evaluated in one stacked forward pass.

Field order inside each layout is fixed and part of the tested contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, ShapeError, Tensor

Array = np.ndarray

CRITIC_KINDS = ("centralv", "coma", "coma-cc")


@dataclass(frozen=True)
class CriticInputLayout:
    """Ordered (field name, width) pairs describing one critic input vector."""

    kind: str
    fields: tuple[tuple[str, int], ...]

    @property
    def width(self) -> int:
        return sum(w for _, w in self.fields)

    def slices(self) -> dict[str, slice]:
        out: dict[str, slice] = {}
        offset = 0
        for name, width in self.fields:
            out[name] = slice(offset, offset + width)
            offset += width
        return out

    def pack(self, **parts: Array) -> Array:
        if set(parts) != {name for name, _ in self.fields}:
            raise ShapeError(
                f"{self.kind} layout expects fields "
                f"{[name for name, _ in self.fields]}, got {sorted(parts)}"
            )
        pieces = []
        for name, width in self.fields:
            arr = np.asarray(parts[name], dtype=np.float64).reshape(-1)
            if arr.size != width:
                raise ShapeError(f"field {name!r} has size {arr.size}, expected {width}")
            pieces.append(arr)
        return np.concatenate(pieces)

    def unpack(self, vector: Array) -> dict[str, Array]:
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.size != self.width:
            raise ShapeError(f"vector width {vector.size} != layout width {self.width}")
        return {name: vector[sl].copy() for name, sl in self.slices().items()}


def centralv_layout(state_width: int) -> CriticInputLayout:
    return CriticInputLayout("centralv", (("state", state_width),))


def coma_layout(state_width: int, obs_width: int, n: int, m: int) -> CriticInputLayout:
    return CriticInputLayout(
        "coma",
        (
            ("state", state_width),
            ("obs", obs_width),
            ("prev_joint", n * m),
            ("joint_others", n * m),
            ("agent_id", n),
        ),
    )


def comacc_layout(state_width: int, obs_width: int, n: int, m: int) -> CriticInputLayout:
    return CriticInputLayout(
        "coma-cc",
        (
            ("state", state_width),
            ("all_obs", n * obs_width),
            ("prev_joint", n * m),
            ("joint", n * m),
        ),
    )


def critic_init(
    rng: np.random.Generator,
    in_width: int,
    out_width: int,
    hidden: Sequence[int] = (128, 128),
) -> ParamSet:
    return ad.mlp_init(rng, (in_width, *hidden, out_width))


def critic_forward(params: ParamSet, inputs) -> Tensor:
    return ad.mlp_forward(params, inputs)


# ---------------------------------------------------------------------------
# Action encodings


def joint_one_hot(actions, m: int) -> Array:
    """Concatenated per-agent one-hots; supports leading batch dimensions."""
    actions = np.asarray(actions, dtype=np.int64)
    n = actions.shape[-1]
    flat = actions.reshape(-1, n)
    out = np.zeros((flat.shape[0], n * m), dtype=np.float64)
    rows = np.arange(flat.shape[0])[:, None]
    out[rows, np.arange(n)[None, :] * m + flat] = 1.0
    return out.reshape(*actions.shape[:-1], n * m)


def zero_joint_one_hot(n: int, m: int) -> Array:
    """Encoding of "no previous joint action" (the all-zeros block)."""
    return np.zeros(n * m, dtype=np.float64)


def mask_own_block(joint_oh: Array, agent: int, m: int) -> Array:
    """Zero agent's own one-hot block inside a joint encoding."""
    out = np.array(joint_oh, dtype=np.float64, copy=True)
    out[..., agent * m : (agent + 1) * m] = 0.0
    return out


def agent_one_hot(agent: int, n: int) -> Array:
    out = np.zeros(n, dtype=np.float64)
    out[agent] = 1.0
    return out


# ---------------------------------------------------------------------------
# Evaluation entry points


def v_value(params: ParamSet, state: Array) -> float:
    """Scalar state value from the centralised V critic."""
    out = _forward_single(params, np.asarray(state, dtype=np.float64))
    return float(out[0])


def coma_counterfactual_qs(
    params: ParamSet,
    state: Array,
    obs_a: Array,
    prev_joint: Array | None,
    joint_action: Sequence[int],
    agent: int,
    m: int,
) -> Array:
    """Agent's counterfactual Q row: one forward pass, m outputs.

    ``prev_joint`` is the previous joint action as indices, or None at the
    first step (encoded as the all-zeros block). The agent's own block in the
    current joint action is zeroed before it enters the network.
    """
    actions = np.asarray(joint_action, dtype=np.int64)
    n = actions.shape[0]
    prev = zero_joint_one_hot(n, m) if prev_joint is None else joint_one_hot(prev_joint, m)
    layout = coma_layout(np.asarray(state).size, np.asarray(obs_a).size, n, m)
    vec = layout.pack(
        state=state,
        obs=obs_a,
        prev_joint=prev,
        joint_others=mask_own_block(joint_one_hot(actions, m), agent, m),
        agent_id=agent_one_hot(agent, n),
    )
    return _forward_single(params, vec)


def comacc_q(
    params: ParamSet,
    state: Array,
    all_obs: Array,
    prev_joint: Array | None,
    joint_action: Sequence[int],
    m: int,
) -> float:
    """Consistent joint-action value: a pure function of the shared inputs."""
    vec = _comacc_vector(state, all_obs, prev_joint, joint_action, m)
    return float(_forward_single(params, vec)[0])


@dataclass
class CounterfactualQTable:
    """n x m counterfactual values; row a varies agent a's action."""

    values: Array               # (n_agents, n_actions)
    taken: Array                # (n_agents,) action indices

    def taken_values(self) -> Array:
        return self.values[np.arange(self.values.shape[0]), self.taken]


def comacc_counterfactual_table(
    params: ParamSet,
    state: Array,
    all_obs: Array,
    prev_joint: Array | None,
    joint_action: Sequence[int],
    m: int,
) -> CounterfactualQTable:
    """All n*m counterfactual joint-action values in a single forward pass.

    Row a, column u holds Q(s, (u_t with agent a's action replaced by u)).
    Because the batched matmul is row-exact, every entry is bit-identical to
    a separate ``comacc_q`` call on the same counterfactual action.
    """
    actions = np.asarray(joint_action, dtype=np.int64)
    n = actions.shape[0]
    rows = []
    for agent in range(n):
        for action in range(m):
            counter = actions.copy()
            counter[agent] = action
            rows.append(_comacc_vector(state, all_obs, prev_joint, counter, m))
    stacked = np.stack(rows)
    with ad.no_grad():
        out = critic_forward(params, stacked).data[:, 0]
    return CounterfactualQTable(values=out.reshape(n, m), taken=actions.copy())


def count_critic_inputs(kind: str, n: int, m: int) -> int:
    """Network inputs needed for one full counterfactual baseline computation."""
    if n < 1 or m < 1:
        raise ValueError("need n, m >= 1")
    if kind == "coma":
        return n
    if kind == "coma-cc":
        return n * m
    raise ValueError(f"unknown critic kind {kind!r}")


# ---------------------------------------------------------------------------


def _forward_single(params: ParamSet, vector: Array) -> Array:
    with ad.no_grad():
        out = critic_forward(params, vector.reshape(1, -1))
    return out.data[0]


def _comacc_vector(state, all_obs, prev_joint, joint_action, m: int) -> Array:
    actions = np.asarray(joint_action, dtype=np.int64)
    n = actions.shape[0]
    all_obs = np.asarray(all_obs, dtype=np.float64)
    prev = zero_joint_one_hot(n, m) if prev_joint is None else joint_one_hot(prev_joint, m)
    layout = comacc_layout(np.asarray(state).size, all_obs.size // n, n, m)
    return layout.pack(
        state=state,
        all_obs=all_obs,
        prev_joint=prev,
        joint=joint_one_hot(actions, m),
    )
