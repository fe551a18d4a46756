"""Exact dynamic-programming value oracles for small enumerable instances.

Given a fixed joint policy, ``exact_state_values`` computes V(s) and
``exact_action_values`` computes Q(s, u) as full expectations over policy
randomness and transition randomness, via memoised recursion over the
environment's enumeration interface. Instances whose expansion exceeds the
path budget are rejected up front rather than silently truncated.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Array = np.ndarray

# policy(key, avail) -> (n_agents, n_actions) array of per-agent probabilities
Policy = Callable[[object, Array], Array]


class InstanceTooLarge(ValueError):
    """Enumeration would exceed the configured path budget."""


@dataclass
class ValueTable:
    """Exact values keyed by enumeration state (and joint action for Q)."""

    state_values: dict = field(default_factory=dict)
    action_values: dict = field(default_factory=dict)
    initial_value: float = 0.0


def uniform_policy(env) -> Policy:
    def policy(key, avail: Array) -> Array:
        probs = avail.astype(np.float64)
        return probs / probs.sum(axis=-1, keepdims=True)

    return policy


def fixed_joint_policy(joint_action) -> Policy:
    joint = tuple(int(a) for a in joint_action)

    def policy(key, avail: Array) -> Array:
        probs = np.zeros_like(avail, dtype=np.float64)
        for agent, action in enumerate(joint):
            probs[agent, action] = 1.0
        return probs

    return policy


class _Enumerator:
    def __init__(self, env, policy: Policy, gamma: float, max_paths: int):
        self.env = env
        self.policy = policy
        self.gamma = gamma
        self.max_paths = max_paths
        self.expansions = 0
        self.v_memo: dict = {}

    def _spend(self, count: int = 1) -> None:
        self.expansions += count
        if self.expansions > self.max_paths:
            raise InstanceTooLarge(
                f"enumeration exceeded {self.max_paths} expansions; "
                "reduce the instance size"
            )

    def q_value(self, key, joint: tuple[int, ...]) -> float:
        total = 0.0
        for next_key, reward, terminal, _win, prob in self.env.transitions(key, joint):
            self._spend()
            future = 0.0 if terminal else self.state_value(next_key)
            total += prob * (reward + self.gamma * future)
        return total

    def state_value(self, key) -> float:
        if key in self.v_memo:
            return self.v_memo[key]
        avail = self.env.avail_actions(key)
        probs = self.policy(key, avail)
        total = 0.0
        for joint in itertools.product(*[np.flatnonzero(avail[a]) for a in range(avail.shape[0])]):
            weight = 1.0
            for agent, action in enumerate(joint):
                weight *= probs[agent, action]
            if weight == 0.0:
                continue
            total += weight * self.q_value(key, tuple(int(a) for a in joint))
        self.v_memo[key] = total
        return total


def exact_state_values(env, policy: Policy, *, gamma: float | None = None,
                       max_paths: int = 10_000_000) -> ValueTable:
    """Exact V over every state reachable from the initial distribution."""
    enum = _Enumerator(env, policy, env.spec.gamma if gamma is None else gamma, max_paths)
    table = ValueTable()
    initial = 0.0
    for key, prob in env.initial_states():
        value = enum.state_value(key)
        initial += prob * value
    table.state_values = dict(enum.v_memo)
    table.initial_value = initial
    return table


def exact_action_values(env, policy: Policy, *, gamma: float | None = None,
                        max_paths: int = 10_000_000) -> ValueTable:
    """Exact Q(s, u) at every reachable state, for every available joint action."""
    enum = _Enumerator(env, policy, env.spec.gamma if gamma is None else gamma, max_paths)
    table = ValueTable()
    initial = 0.0
    pending = list(env.initial_states())
    seen = set()
    queue = [key for key, _ in pending]
    while queue:
        key = queue.pop()
        if key in seen:
            continue
        seen.add(key)
        avail = env.avail_actions(key)
        for joint in itertools.product(*[np.flatnonzero(avail[a]) for a in range(avail.shape[0])]):
            joint_t = tuple(int(a) for a in joint)
            table.action_values[(key, joint_t)] = enum.q_value(key, joint_t)
            for next_key, _r, terminal, _w, _p in env.transitions(key, joint_t):
                if not terminal and next_key not in seen:
                    queue.append(next_key)
    for key, prob in pending:
        initial += prob * enum.state_value(key)
    table.state_values = dict(enum.v_memo)
    table.initial_value = initial
    return table
