"""Per-agent action values from a weight-shared ensemble of recurrent tree cells.

One network serves every agent: the input vector is the local observation
followed by a one-hot of the previous action and a one-hot of the agent's
role, so agents stay interchangeable up to their role encoding. Each tree
in the ensemble carries its own hidden scalar across time; the per-action
value is a linear read-out of the stacked hidden scalars.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, EnvContractError
from .trees import (
    CellCache,
    CellGrads,
    HiddenState,
    TreeEnsemble,
    TreeParams,
    TreeTopology,
    cell_backward,
    cell_forward,
    init_ensemble,
    tree_param_count,
)


@dataclass(frozen=True)
class InputLayout:
    """Slice map of the per-agent input vector: [obs | prev action | role]."""

    obs_dim: int
    n_actions: int
    n_agents: int

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.n_actions + self.n_agents

    @property
    def obs_slice(self) -> slice:
        return slice(0, self.obs_dim)

    @property
    def action_slice(self) -> slice:
        return slice(self.obs_dim, self.obs_dim + self.n_actions)

    @property
    def role_slice(self) -> slice:
        return slice(self.obs_dim + self.n_actions, self.input_dim)

    def feature_names(self, obs_names: Optional[list[str]] = None) -> list[str]:
        if obs_names is None:
            obs_names = [f"obs{i}" for i in range(self.obs_dim)]
        if len(obs_names) != self.obs_dim:
            raise ConfigurationError(
                f"{len(obs_names)} observation names for obs_dim {self.obs_dim}"
            )
        return (list(obs_names)
                + [f"prev_act{a}" for a in range(self.n_actions)]
                + [f"role{i}" for i in range(self.n_agents)])

    def groups(self) -> dict[str, slice]:
        return {"obs": self.obs_slice, "prev_action": self.action_slice,
                "role": self.role_slice}


@dataclass
class AgentInput:
    """One agent's input at one step; one-hots follow the layout invariants."""

    obs: np.ndarray
    prev_action: np.ndarray
    role: np.ndarray

    def validate(self, layout: InputLayout) -> None:
        if self.obs.shape != (layout.obs_dim,):
            raise ConfigurationError(f"obs shape {self.obs.shape} != ({layout.obs_dim},)")
        if self.prev_action.shape != (layout.n_actions,):
            raise ConfigurationError("prev_action one-hot has the wrong length")
        if self.role.shape != (layout.n_agents,):
            raise ConfigurationError("role one-hot has the wrong length")
        nz = np.flatnonzero(self.prev_action)
        if nz.size > 1 or (nz.size == 1 and self.prev_action[nz[0]] != 1.0):
            raise ConfigurationError("prev_action must be all-zero or a single 1")
        nz = np.flatnonzero(self.role)
        if nz.size != 1 or self.role[nz[0]] != 1.0:
            raise ConfigurationError("role must be a one-hot vector")

    def concat(self) -> np.ndarray:
        return np.concatenate([self.obs, self.prev_action, self.role])


def make_input(layout: InputLayout, obs: np.ndarray, prev_action: Optional[int],
               agent_index: int) -> AgentInput:
    pa = np.zeros(layout.n_actions)
    if prev_action is not None:
        pa[prev_action] = 1.0
    role = np.zeros(layout.n_agents)
    role[agent_index] = 1.0
    return AgentInput(obs=np.asarray(obs, dtype=np.float64), prev_action=pa, role=role)


@dataclass
class AgentNet:
    """Shared-weight ensemble of tree cells plus a linear action read-out."""

    layout: InputLayout
    cells: TreeEnsemble
    w_q: np.ndarray  # (H, n_actions)

    @property
    def size(self) -> int:
        return self.cells.size

    @property
    def topology(self) -> TreeTopology:
        return self.cells.topology

    @property
    def recurrent(self) -> bool:
        return self.cells.recurrent

    def tree(self, k: int) -> TreeParams:
        return self.cells.tree(k)

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        items = [("agent/w_o", self.cells.w_o), ("agent/b", self.cells.b)]
        if self.cells.w_h is not None:
            items.append(("agent/w_h", self.cells.w_h))
        items.append(("agent/theta_h", self.cells.theta_h))
        items.append(("agent/w_q", self.w_q))
        return items

    @property
    def n_params(self) -> int:
        return sum(arr.size for _, arr in self.param_items())

    def copy(self) -> "AgentNet":
        cells = TreeEnsemble(
            topology=self.cells.topology,
            w_o=self.cells.w_o.copy(),
            b=self.cells.b.copy(),
            w_h=None if self.cells.w_h is None else self.cells.w_h.copy(),
            theta_h=self.cells.theta_h.copy(),
        )
        return AgentNet(layout=self.layout, cells=cells, w_q=self.w_q.copy())

    def load_from(self, other: "AgentNet") -> None:
        for (_, dst), (_, src) in zip(self.param_items(), other.param_items()):
            np.copyto(dst, src)


def agent_param_count(layout: InputLayout, depth: int, size: int, recurrent: bool) -> int:
    """Closed-form count matching ``AgentNet.n_params``."""
    per_tree = tree_param_count(depth, layout.input_dim, 1 if recurrent else 0)
    return size * per_tree + size * layout.n_actions


def init_agent_net(rng: np.random.Generator, layout: InputLayout, depth: int,
                   size: int, recurrent: bool = True) -> AgentNet:
    topology = TreeTopology(depth)
    cells = init_ensemble(rng, topology, size, layout.input_dim, recurrent)
    bound = 1.0 / np.sqrt(size)
    w_q = rng.uniform(-bound, bound, size=(size, layout.n_actions))
    return AgentNet(layout=layout, cells=cells, w_q=w_q)


def init_hidden(size: int, n_agents: int) -> list[HiddenState]:
    """Fresh per-agent hidden states: all zeros at the start of an episode."""
    if size < 1:
        raise ConfigurationError("ensemble size must be >= 1")
    return [HiddenState(h=np.zeros(size), t=0) for _ in range(n_agents)]


def agent_q(net: AgentNet, inp: AgentInput, hidden: HiddenState):
    """Action values and next hidden state for a single agent step."""
    inp.validate(net.layout)
    if hidden.h.shape != (net.size,):
        raise ConfigurationError(
            f"hidden length {hidden.h.shape} does not match ensemble size {net.size}"
        )
    x = inp.concat()[None, :]
    h = hidden.h[None, :] if net.recurrent else None
    h_new, _ = cell_forward(net.cells, x, h)
    q = h_new @ net.w_q
    return q[0], HiddenState(h=h_new[0], t=hidden.t + 1)


def agent_q_batch(net: AgentNet, x: np.ndarray, h: Optional[np.ndarray]):
    """Batched step over rows of stacked (episode, agent) inputs."""
    if x.shape[1] != net.layout.input_dim:
        raise ConfigurationError(
            f"input width {x.shape[1]} does not match layout {net.layout.input_dim}"
        )
    h_new, cache = cell_forward(net.cells, x, h if net.recurrent else None)
    q = h_new @ net.w_q
    return q, h_new, cache


@dataclass
class AgentStepGrads:
    cells: CellGrads
    w_q: np.ndarray


def agent_backward_step(net: AgentNet, cache: CellCache, d_q: np.ndarray,
                        d_h_new: Optional[np.ndarray]):
    """Backward through one batched step.

    ``d_q`` is the upstream gradient on the action values; ``d_h_new``
    carries gradient arriving from the following timestep's hidden input.
    Returns (d_x, d_h_prev, AgentStepGrads).
    """
    upstream = d_q @ net.w_q.T
    if d_h_new is not None:
        upstream = upstream + d_h_new
    g_w_q = cache.h_new.T @ d_q
    dx, dh, cell_grads = cell_backward(net.cells, cache, upstream)
    return dx, dh, AgentStepGrads(cells=cell_grads, w_q=g_w_q)


def select_action(q: np.ndarray, avail: np.ndarray, epsilon: float,
                  rng: np.random.Generator) -> int:
    """Epsilon-greedy choice restricted to available actions.

    Greedy ties break toward the lowest index. With ``epsilon == 0`` no
    randomness is consumed, which keeps greedy evaluation reproducible
    regardless of the caller's generator state.
    """
    avail = np.asarray(avail, dtype=bool)
    if q.shape != avail.shape:
        raise ConfigurationError(f"q shape {q.shape} does not match mask {avail.shape}")
    if not avail.any():
        raise EnvContractError("availability mask has no available action")
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigurationError(f"epsilon must be in [0, 1], got {epsilon}")
    if epsilon > 0.0 and rng.random() < epsilon:
        candidates = np.flatnonzero(avail)
        return int(candidates[rng.integers(candidates.size)])
    masked = np.where(avail, q, -np.inf)
    return int(np.argmax(masked))
