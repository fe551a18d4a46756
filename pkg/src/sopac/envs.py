"""Desk-scale cooperative multi-agent environments.

Both environments implement the same stateful interface (``reset`` / ``step``)
plus an enumeration interface (``initial_states`` / ``transitions``) that the
exact value oracle consumes. All randomness flows through a generator seeded
at ``reset``, so a (seed, action sequence) pair replays bit-identically.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class EnvSpec:
    """Sizes of a cooperative partially observable task."""

    n_agents: int
    n_actions: int
    state_width: int
    obs_width: int
    horizon: int
    gamma: float = 0.99

    def __post_init__(self) -> None:
        if self.n_agents < 1 or self.n_actions < 2 or self.horizon < 1:
            raise ValueError(f"invalid environment sizes: {self}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"discount must lie in (0, 1], got {self.gamma}")


@dataclass
class StepResult:
    state: Array
    obs: Array            # (n_agents, obs_width)
    reward: float
    terminal: bool
    win: bool
    avail: Array          # (n_agents, n_actions) booleans


class EnvError(RuntimeError):
    """Illegal interaction with an environment (masked action, step after end)."""


# ---------------------------------------------------------------------------
# One-shot coordination game


_DEFAULT_PAYOFF = (
    (0.0, 0.1, 0.2),
    (0.1, 0.3, 0.4),
    (0.2, 0.4, 1.0),
)


@dataclass(frozen=True)
class SwitchGameConfig:
    """Two agents pick one action each; the payoff matrix is the reward.

    The default matrix has a single maximal entry and action 2 dominates for
    both agents, so gradient methods find the optimum without deceptive
    equilibria.
    """

    payoff: tuple[tuple[float, ...], ...] = _DEFAULT_PAYOFF

    def __post_init__(self) -> None:
        m = len(self.payoff)
        if m < 2 or any(len(row) != m for row in self.payoff):
            raise ValueError("payoff must be a square matrix with m >= 2")
        if not np.isfinite(np.asarray(self.payoff, dtype=np.float64)).all():
            raise ValueError("payoff entries must be finite")


class SwitchGame:
    """One simultaneous move, shared reward read from a payoff matrix.

    Each agent observes only its own one-hot id; the global state is the
    constant vector [1.0]. A step wins when it hits the matrix maximum.
    """

    def __init__(self, config: SwitchGameConfig | None = None):
        self.config = config or SwitchGameConfig()
        self.payoff = np.asarray(self.config.payoff, dtype=np.float64)
        m = self.payoff.shape[0]
        self.spec = EnvSpec(
            n_agents=2, n_actions=m, state_width=1, obs_width=2, horizon=1
        )
        self._max = float(self.payoff.max())
        self._terminal = True

    def reset(self, seed: int) -> tuple[Array, Array, Array]:
        del seed  # single deterministic initial state
        self._terminal = False
        return self.state_vector(0), self.observations(0), self.avail_actions(0)

    def step(self, joint_action: Iterable[int]) -> StepResult:
        if self._terminal:
            raise EnvError("step() after terminal state")
        u = tuple(int(a) for a in joint_action)
        m = self.spec.n_actions
        if len(u) != 2 or any(not 0 <= a < m for a in u):
            raise EnvError(f"joint action {u} outside 2 agents x {m} actions")
        reward = float(self.payoff[u[0], u[1]])
        self._terminal = True
        return StepResult(
            state=self.state_vector(0),
            obs=self.observations(0),
            reward=reward,
            terminal=True,
            win=reward == self._max,
            avail=self.avail_actions(0),
        )

    # enumeration interface -------------------------------------------------

    def initial_states(self) -> list[tuple[int, float]]:
        return [(0, 1.0)]

    def transitions(self, key: int, joint_action: tuple[int, ...]):
        reward = float(self.payoff[joint_action[0], joint_action[1]])
        return [(0, reward, True, reward == self._max, 1.0)]

    def state_vector(self, key: int) -> Array:
        del key
        return np.ones(1, dtype=np.float64)

    def observations(self, key: int) -> Array:
        del key
        return np.eye(2, dtype=np.float64)

    def avail_actions(self, key: int) -> Array:
        del key
        return np.ones((2, self.spec.n_actions), dtype=bool)


# ---------------------------------------------------------------------------
# Multi-step pursuit on a grid


@dataclass(frozen=True)
class CaptureGridConfig:
    """Agents herd a prey on a square grid under a shared reward.

    Agents move simultaneously (stay/up/down/left/right). A move is blocked
    (the agent stays put) when its target cell is the prey cell, is occupied
    by any agent at the start of the step, or is targeted by another agent;
    this makes conflict resolution order-independent. The team wins when
    every agent is orthogonally adjacent to the prey after all moves.
    """

    side: int = 5
    n_agents: int = 2
    prey: str = "static"          # "static" or "walk"
    view_radius: int = 1
    capture_reward: float = 10.0
    step_penalty: float = -0.1
    horizon: int = 20

    def __post_init__(self) -> None:
        if self.side < 3:
            raise ValueError("grid side must be >= 3")
        if self.n_agents < 2:
            raise ValueError("need at least 2 agents")
        if self.view_radius < 1:
            raise ValueError("view radius must be >= 1")
        if self.prey not in ("static", "walk"):
            raise ValueError(f"unknown prey policy {self.prey!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


_MOVES = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))  # stay, up, down, left, right
Cell = tuple[int, int]
GridKey = tuple[tuple[Cell, ...], Cell, int]  # (agent cells, prey cell, t)


class CaptureGrid:
    """Partially observable pursuit task; see :class:`CaptureGridConfig`."""

    def __init__(self, config: CaptureGridConfig | None = None):
        self.config = config or CaptureGridConfig()
        c = self.config
        window = (2 * c.view_radius + 1) ** 2
        self.spec = EnvSpec(
            n_agents=c.n_agents,
            n_actions=5,
            state_width=2 * (c.n_agents + 1) + 1,
            obs_width=4 * window + c.n_agents + 2,
            horizon=c.horizon,
        )
        self._agents: tuple[Cell, ...] = ()
        self._prey: Cell = (0, 0)
        self._t = 0
        self._terminal = True
        self._rng: np.random.Generator | None = None

    # stateful interface -----------------------------------------------------

    def reset(self, seed: int) -> tuple[Array, Array, Array]:
        c = self.config
        self._rng = np.random.default_rng(seed)
        cells: list[Cell] = []
        while len(cells) < c.n_agents + 1:  # rejection-sample distinct cells
            cell = (
                int(self._rng.integers(c.side)),
                int(self._rng.integers(c.side)),
            )
            if cell not in cells:
                cells.append(cell)
        self._agents = tuple(cells[: c.n_agents])
        self._prey = cells[c.n_agents]
        self._t = 0
        self._terminal = False
        key = self._key()
        return self.state_vector(key), self.observations(key), self.avail_actions(key)

    def step(self, joint_action: Iterable[int]) -> StepResult:
        if self._terminal:
            raise EnvError("step() after terminal state")
        u = tuple(int(a) for a in joint_action)
        avail = self.avail_actions(self._key())
        if len(u) != self.config.n_agents:
            raise EnvError(f"expected {self.config.n_agents} actions, got {len(u)}")
        for agent, action in enumerate(u):
            if not 0 <= action < 5 or not avail[agent, action]:
                raise EnvError(f"agent {agent} action {action} is masked")

        agents = self._move_agents(self._agents, u)
        prey = self._prey
        if self.config.prey == "walk":
            options = self._prey_options(prey, agents)
            prey = options[int(self._rng.integers(len(options)))]

        captured = all(_adjacent(a, prey) for a in agents)
        self._agents, self._prey = agents, prey
        self._t += 1
        if captured:
            reward, win, terminal = self.config.capture_reward, True, True
        else:
            reward, win = self.config.step_penalty, False
            terminal = self._t >= self.config.horizon
        self._terminal = terminal
        key = self._key()
        return StepResult(
            state=self.state_vector(key),
            obs=self.observations(key),
            reward=float(reward),
            terminal=terminal,
            win=win,
            avail=self.avail_actions(key),
        )

    # movement rules ----------------------------------------------------------

    def _move_agents(self, agents: tuple[Cell, ...], u: tuple[int, ...]) -> tuple[Cell, ...]:
        targets = [
            (agents[i][0] + _MOVES[a][0], agents[i][1] + _MOVES[a][1])
            for i, a in enumerate(u)
        ]
        occupied = set(agents)
        out: list[Cell] = []
        for i, target in enumerate(targets):
            contested = any(j != i and targets[j] == target for j in range(len(targets)))
            blocked = (
                target == self._prey
                or (target != agents[i] and target in occupied)
                or contested
            )
            out.append(agents[i] if blocked else target)
        return tuple(out)

    def _prey_options(self, prey: Cell, agents: tuple[Cell, ...]) -> list[Cell]:
        side = self.config.side
        options = []
        for dr, dc in _MOVES:
            cell = (prey[0] + dr, prey[1] + dc)
            if 0 <= cell[0] < side and 0 <= cell[1] < side and cell not in agents:
                options.append(cell)
        return options or [prey]

    # enumeration interface ----------------------------------------------------

    def initial_states(self) -> list[tuple[GridKey, float]]:
        side = self.config.side
        n = self.config.n_agents
        cells = [(r, c) for r in range(side) for c in range(side)]
        keys: list[GridKey] = [
            (tuple(combo[:n]), combo[n], 0)
            for combo in itertools.permutations(cells, n + 1)
        ]
        prob = 1.0 / len(keys)
        return [(key, prob) for key in keys]

    def transitions(self, key: GridKey, joint_action: tuple[int, ...]):
        agents, prey, t = key
        saved = (self._agents, self._prey, self._t, self._terminal)
        self._agents, self._prey = agents, prey
        moved = self._move_agents(agents, joint_action)
        self._agents, self._prey, self._t, self._terminal = saved

        if self.config.prey == "walk":
            options = self._prey_options(prey, moved)
            outcomes = [(cell, 1.0 / len(options)) for cell in options]
        else:
            outcomes = [(prey, 1.0)]
        result = []
        for new_prey, prob in outcomes:
            captured = all(_adjacent(a, new_prey) for a in moved)
            if captured:
                reward, win, terminal = self.config.capture_reward, True, True
            else:
                reward, win = self.config.step_penalty, False
                terminal = t + 1 >= self.config.horizon
            result.append(((moved, new_prey, t + 1), float(reward), terminal, win, prob))
        return result

    # feature builders ----------------------------------------------------------

    def _key(self) -> GridKey:
        return (self._agents, self._prey, self._t)

    def state_vector(self, key: GridKey | int) -> Array:
        agents, prey, t = key  # type: ignore[misc]
        side = self.config.side
        denom = float(side - 1)
        parts: list[float] = []
        for cell in (*agents, prey):
            parts.extend((cell[0] / denom, cell[1] / denom))
        parts.append(t / float(self.config.horizon))
        return np.asarray(parts, dtype=np.float64)

    def observations(self, key: GridKey | int) -> Array:
        agents, prey, _ = key  # type: ignore[misc]
        c = self.config
        r = c.view_radius
        span = 2 * r + 1
        denom = float(c.side - 1)
        obs = np.zeros((c.n_agents, self.spec.obs_width), dtype=np.float64)
        for a, (ar, ac) in enumerate(agents):
            window = np.zeros((4, span, span), dtype=np.float64)
            for dr in range(-r, r + 1):
                for dc in range(-r, r + 1):
                    rr, cc = ar + dr, ac + dc
                    wr, wc = dr + r, dc + r
                    if not (0 <= rr < c.side and 0 <= cc < c.side):
                        window[3, wr, wc] = 1.0  # wall
                        continue
                    if (rr, cc) == (ar, ac):
                        window[0, wr, wc] = 1.0  # self
                    if any(i != a and agents[i] == (rr, cc) for i in range(c.n_agents)):
                        window[1, wr, wc] = 1.0  # ally
                    if prey == (rr, cc):
                        window[2, wr, wc] = 1.0
            flat = window.reshape(-1)
            one_hot = np.zeros(c.n_agents)
            one_hot[a] = 1.0
            coords = np.asarray([ar / denom, ac / denom])
            obs[a] = np.concatenate([flat, one_hot, coords])
        return obs

    def avail_actions(self, key: GridKey | int) -> Array:
        agents, _, _ = key  # type: ignore[misc]
        side = self.config.side
        avail = np.zeros((self.config.n_agents, 5), dtype=bool)
        for a, (ar, ac) in enumerate(agents):
            for m, (dr, dc) in enumerate(_MOVES):
                rr, cc = ar + dr, ac + dc
                avail[a, m] = 0 <= rr < side and 0 <= cc < side
        return avail


def _adjacent(a: Cell, b: Cell) -> bool:
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1


def make_env(name: str, env_config: dict | None = None):
    """Construct an environment by name ("switch" or "capture")."""
    env_config = dict(env_config or {})
    if name == "switch":
        if "payoff" in env_config:
            env_config["payoff"] = tuple(tuple(row) for row in env_config["payoff"])
        return SwitchGame(SwitchGameConfig(**env_config))
    if name == "capture":
        return CaptureGrid(CaptureGridConfig(**env_config))
    raise ValueError(f"unknown environment {name!r}")
