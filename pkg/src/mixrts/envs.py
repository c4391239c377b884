"""Desk-scale cooperative Dec-POMDP environments.

Three tasks, each isolating one capability: a one-shot coordination
matrix game, a signal-recall game that is unsolvable without memory, and
a partially observable predator-prey grid. All observations and states
are normalized to [0, 1]; every episode ends with a terminal flag at or
before the episode limit, and rewards are shared by the whole team.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, EnvContractError


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    episode_limit: int
    name: str

    def __post_init__(self):
        for field in ("n_agents", "n_actions", "obs_dim", "state_dim", "episode_limit"):
            if getattr(self, field) <= 0:
                raise ConfigurationError(f"{field} must be positive")


@dataclass
class StepResult:
    obs: np.ndarray          # (n_agents, obs_dim)
    state: np.ndarray        # (state_dim,)
    reward: float
    terminated: bool
    avail: np.ndarray        # (n_agents, n_actions) bool


class Env:
    """Single-owner mutable environment; parallel rollouts use separate
    instances."""

    spec: EnvSpec
    obs_feature_names: list[str]

    def reset(self, seed: int):
        raise NotImplementedError

    def step(self, actions) -> StepResult:
        raise NotImplementedError

    def avail_actions(self) -> np.ndarray:
        raise NotImplementedError

    def is_success(self) -> bool:
        raise NotImplementedError

    def _check_actions(self, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.spec.n_agents,):
            raise EnvContractError(
                f"{self.spec.name}: expected {self.spec.n_agents} actions, got {actions.shape}"
            )
        avail = self.avail_actions()
        for i, a in enumerate(actions):
            if not 0 <= a < self.spec.n_actions:
                raise EnvContractError(f"{self.spec.name}: action {a} out of range for agent {i}")
            if not avail[i, a]:
                raise EnvContractError(
                    f"{self.spec.name}: agent {i} took unavailable action {a}"
                )
        return actions


DEFAULT_PAYOFF = np.array([
    [8.0, -12.0, -12.0],
    [-12.0, 0.0, 0.0],
    [-12.0, 0.0, 6.0],
])


def optimal_matrix_return(payoff: np.ndarray):
    """Exhaustive maximum of a joint-action payoff tensor.

    Returns (value, joint action tuple); ties resolve to the
    lexicographically smallest joint action.
    """
    payoff = np.asarray(payoff, dtype=np.float64)
    flat = int(np.argmax(payoff))
    return float(payoff.flat[flat]), tuple(int(v) for v in np.unravel_index(flat, payoff.shape))


def load_payoff_csv(path) -> np.ndarray:
    payoff = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if payoff.ndim != 2 or payoff.shape[0] < 1 or payoff.shape[1] < 1:
        raise ConfigurationError(f"payoff CSV {path} must hold a 2-D matrix")
    return payoff


class CooperativeMatrixGame(Env):
    """One-shot two-player coordination game over a payoff matrix.

    The default payoff has a single global optimum in the corner and a
    deceptive low-risk region, so uncoordinated greedy learners tend to
    settle on the wrong joint action.
    """

    def __init__(self, payoff: np.ndarray | None = None):
        payoff = DEFAULT_PAYOFF if payoff is None else np.asarray(payoff, dtype=np.float64)
        if payoff.ndim != 2:
            raise ConfigurationError("matrix game needs a 2-D payoff matrix")
        if payoff.shape[0] != payoff.shape[1]:
            raise ConfigurationError("matrix game payoff must be square")
        self.payoff = payoff
        n_actions = payoff.shape[0]
        self.spec = EnvSpec(n_agents=2, n_actions=n_actions, obs_dim=1, state_dim=1,
                            episode_limit=1, name="matrix")
        self.obs_feature_names = ["const"]
        self._done = True
        self._last_reward = 0.0
        self._optimum, _ = optimal_matrix_return(payoff)

    def reset(self, seed: int):
        self._done = False
        self._last_reward = 0.0
        obs = np.ones((2, 1))
        state = np.ones(1)
        return obs, state

    def avail_actions(self) -> np.ndarray:
        return np.ones((2, self.spec.n_actions), dtype=bool)

    def step(self, actions) -> StepResult:
        if self._done:
            raise EnvContractError("matrix: step called on a finished episode")
        actions = self._check_actions(actions)
        reward = float(self.payoff[tuple(actions)])
        self._done = True
        self._last_reward = reward
        return StepResult(obs=np.ones((2, 1)), state=np.ones(1), reward=reward,
                          terminated=True, avail=self.avail_actions())

    def is_success(self) -> bool:
        return self._done and self._last_reward == self._optimum


class MemoryRecallGame(Env):
    """Each agent privately sees a binary signal at the first step and must
    repeat it with its final action; intermediate observations are blank.

    Only the no-op is available before the final step, so the previous
    action carries no information and any policy without memory is capped
    at an expected return of one out of two.
    """

    HORIZON = 3

    def __init__(self):
        self.spec = EnvSpec(n_agents=2, n_actions=2, obs_dim=3, state_dim=3,
                            episode_limit=self.HORIZON, name="memory")
        self.obs_feature_names = ["signal", "signal_present", "step"]
        self._t = 0
        self._signals = np.zeros(2, dtype=np.int64)
        self._done = True
        self._last_reward = 0.0

    def _obs(self) -> np.ndarray:
        obs = np.zeros((2, 3))
        if self._t == 0:
            obs[:, 0] = self._signals
            obs[:, 1] = 1.0
        obs[:, 2] = self._t / self.HORIZON
        return obs

    def _state(self) -> np.ndarray:
        return np.array([self._signals[0], self._signals[1], self._t / self.HORIZON],
                        dtype=np.float64)

    def reset(self, seed: int):
        rng = np.random.default_rng(seed)
        self._signals = rng.integers(0, 2, size=2)
        self._t = 0
        self._done = False
        self._last_reward = 0.0
        return self._obs(), self._state()

    def avail_actions(self) -> np.ndarray:
        avail = np.zeros((2, 2), dtype=bool)
        avail[:, 0] = True
        if self._t == self.HORIZON - 1:
            avail[:, 1] = True
        return avail

    def step(self, actions) -> StepResult:
        if self._done:
            raise EnvContractError("memory: step called on a finished episode")
        actions = self._check_actions(actions)
        final = self._t == self.HORIZON - 1
        reward = 0.0
        if final:
            reward = float(np.sum(actions == self._signals))
            self._done = True
            self._last_reward = reward
        self._t += 1
        return StepResult(obs=self._obs(), state=self._state(), reward=reward,
                          terminated=final, avail=self.avail_actions())

    def is_success(self) -> bool:
        return self._done and self._last_reward == 2.0

    def final_reward(self, signals, final_actions) -> float:
        """Reward as a pure function of the signals and the final actions."""
        return float(np.sum(np.asarray(final_actions) == np.asarray(signals)))


class PredatorPreyGrid(Env):
    """Two predators chase a randomly moving prey on a 5x5 grid.

    Each predator sees a 3x3 egocentric window (prey flag and partner
    flag per cell) plus its own normalized position and the step counter,
    so the prey is invisible from afar. Any predator sharing the prey's
    cell captures it for +10; every step costs 0.1. Reaching the step
    limit ends the episode.
    """

    SIZE = 5
    LIMIT = 20
    # action index -> (dx, dy): stay, north, south, east, west
    MOVES = np.array([[0, 0], [0, -1], [0, 1], [1, 0], [-1, 0]])

    def __init__(self):
        window = [f"prey({dx},{dy})" for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
        partner = [f"ally({dx},{dy})" for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
        self.obs_feature_names = window + partner + ["own_x", "own_y", "step"]
        self.spec = EnvSpec(n_agents=2, n_actions=5, obs_dim=21, state_dim=7,
                            episode_limit=self.LIMIT, name="grid")
        self._rng = np.random.default_rng(0)
        self._pred = np.zeros((2, 2), dtype=np.int64)
        self._prey = np.zeros(2, dtype=np.int64)
        self._t = 0
        self._done = True
        self._captured = False

    def reset(self, seed: int):
        self._rng = np.random.default_rng(seed)
        cells = self._rng.choice(self.SIZE * self.SIZE, size=3, replace=False)
        self._pred[0] = divmod(cells[0], self.SIZE)[::-1]
        self._pred[1] = divmod(cells[1], self.SIZE)[::-1]
        self._prey = np.array(divmod(cells[2], self.SIZE)[::-1], dtype=np.int64)
        self._t = 0
        self._done = False
        self._captured = False
        return self._obs(), self._state()

    def _window(self, center: np.ndarray, target: np.ndarray) -> np.ndarray:
        flags = np.zeros(9)
        d = target - center
        if -1 <= d[0] <= 1 and -1 <= d[1] <= 1:
            flags[(d[1] + 1) * 3 + (d[0] + 1)] = 1.0
        return flags

    def _obs(self) -> np.ndarray:
        denom = self.SIZE - 1
        rows = []
        for i in range(2):
            own = self._pred[i]
            rows.append(np.concatenate([
                self._window(own, self._prey),
                self._window(own, self._pred[1 - i]),
                own / denom,
                [self._t / self.LIMIT],
            ]))
        return np.stack(rows)

    def _state(self) -> np.ndarray:
        denom = self.SIZE - 1
        return np.concatenate([
            self._pred[0] / denom, self._pred[1] / denom, self._prey / denom,
            [self._t / self.LIMIT],
        ])

    def avail_actions(self) -> np.ndarray:
        return np.ones((2, 5), dtype=bool)

    def _clamp(self, pos: np.ndarray) -> np.ndarray:
        return np.clip(pos, 0, self.SIZE - 1)

    def step(self, actions) -> StepResult:
        if self._done:
            raise EnvContractError("grid: step called on a finished episode")
        actions = self._check_actions(actions)
        for i in range(2):
            self._pred[i] = self._clamp(self._pred[i] + self.MOVES[actions[i]])
        captured = any((self._pred[i] == self._prey).all() for i in range(2))
        if not captured:
            move = self.MOVES[self._rng.integers(5)]
            self._prey = self._clamp(self._prey + move)
            captured = any((self._pred[i] == self._prey).all() for i in range(2))
        self._t += 1
        reward = -0.1 + (10.0 if captured else 0.0)
        terminated = captured or self._t >= self.LIMIT
        self._done = terminated
        self._captured = captured
        return StepResult(obs=self._obs(), state=self._state(), reward=reward,
                          terminated=terminated, avail=self.avail_actions())

    def is_success(self) -> bool:
        return self._captured

    def greedy_chase_actions(self) -> np.ndarray:
        """Scripted baseline using privileged positions: each predator takes
        the lowest-index move that minimizes Manhattan distance to the prey."""
        actions = np.zeros(2, dtype=np.int64)
        for i in range(2):
            best, best_d = 0, None
            for a, move in enumerate(self.MOVES):
                pos = self._clamp(self._pred[i] + move)
                d = int(np.abs(pos - self._prey).sum())
                if best_d is None or d < best_d:
                    best, best_d = a, d
            actions[i] = best
        return actions


def make_env(name: str, payoff_csv: str = "") -> Env:
    if name == "matrix":
        payoff = load_payoff_csv(payoff_csv) if payoff_csv else None
        return CooperativeMatrixGame(payoff)
    if name == "memory":
        return MemoryRecallGame()
    if name == "grid":
        return PredatorPreyGrid()
    raise ConfigurationError(f"unknown environment {name!r}; expected matrix, memory or grid")
