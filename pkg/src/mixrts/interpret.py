"""Explanation extraction: feature importance, decision traces, tree dumps.

Feature importance comes in four flavours: confidence-weighted filters at
the deepest non-leaf level (reported as the mean over the ensemble, with
the per-tree values available), plain filter sums along the greedy path
or over the whole tree, and the gradient of a chosen action value in the
input. Decision traces replay a recorded episode through the networks and
serialize everything needed to reproduce the recorded values bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .agent import AgentNet, agent_backward_step, agent_q_batch
from .errors import ConfigurationError
from .learner import Checkpoint, Episode, build_step_inputs
from .mixer import MixerNet, mixing_weights
from .trees import TreeEnsemble, TreeTopology, cell_forward

IMPORTANCE_METHODS = ("confidence", "sum-path", "sum-all", "gradient")


def _forward_cache(agent: AgentNet, x: np.ndarray, hidden: Optional[np.ndarray]):
    h = hidden[None, :] if agent.recurrent else None
    _, cache = cell_forward(agent.cells, x[None, :], h)
    return cache


def importance_confidence(agent: AgentNet, x: np.ndarray,
                          hidden: Optional[np.ndarray], per_tree: bool = False):
    """Filters of the deepest non-leaf nodes weighted by the probability of
    reaching them; those reach probabilities form a distribution, so this
    is a convex combination of filters per tree, averaged over the ensemble."""
    cache = _forward_cache(agent, x, hidden)
    topo = agent.topology
    ids = np.array(list(topo.level_nodes(topo.depth - 1)))
    reach = cache.reach[0][:, ids]                      # (H, 2**(depth-1))
    filters = agent.cells.w_o[:, ids - 1, :]            # (H, ·, D)
    trees = np.einsum("hj,hjd->hd", reach, filters)
    return trees if per_tree else trees.mean(axis=0)


def importance_sum_path(agent: AgentNet, x: np.ndarray,
                        hidden: Optional[np.ndarray], per_tree: bool = False):
    """Unweighted sum of the filters along each tree's greedy decision path
    (at every node follow the branch with probability >= 1/2)."""
    cache = _forward_cache(agent, x, hidden)
    topo = agent.topology
    p = cache.p[0]  # (H, n_inner)
    trees = np.zeros((agent.size, agent.layout.input_dim))
    for k in range(agent.size):
        node = 1
        while node <= topo.n_inner:
            trees[k] += agent.cells.w_o[k, node - 1]
            node = 2 * node if p[k, node - 1] >= 0.5 else 2 * node + 1
    return trees if per_tree else trees.mean(axis=0)


def importance_sum_all(agent: AgentNet, x: np.ndarray,
                       hidden: Optional[np.ndarray], per_tree: bool = False):
    """Unweighted sum of every node filter in the tree."""
    trees = agent.cells.w_o.sum(axis=1)
    return trees if per_tree else trees.mean(axis=0)


def importance_gradient(agent: AgentNet, x: np.ndarray,
                        hidden: Optional[np.ndarray], action: int) -> np.ndarray:
    """Gradient of the chosen action value in the current input vector
    (the previous hidden state is held fixed)."""
    h = hidden[None, :] if agent.recurrent else None
    _, _, cache = agent_q_batch(agent, x[None, :], h)
    d_q = np.zeros((1, agent.layout.n_actions))
    d_q[0, action] = 1.0
    dx, _, _ = agent_backward_step(agent, cache, d_q, None)
    return dx[0]


def compute_importance(method: str, agent: AgentNet, x: np.ndarray,
                       hidden: Optional[np.ndarray], action: int) -> np.ndarray:
    if method == "confidence":
        return importance_confidence(agent, x, hidden)
    if method == "sum-path":
        return importance_sum_path(agent, x, hidden)
    if method == "sum-all":
        return importance_sum_all(agent, x, hidden)
    if method == "gradient":
        return importance_gradient(agent, x, hidden, action)
    raise ConfigurationError(
        f"unknown importance method {method!r}; expected one of {IMPORTANCE_METHODS}"
    )


# ---------------------------------------------------------------------------
# decision traces
# ---------------------------------------------------------------------------


def _subtree_leaf_means(cells: TreeEnsemble) -> np.ndarray:
    """Mean leaf scalar under every heap slot, per tree: (H, 2 * n_inner + 2)."""
    topo = cells.topology
    means = np.zeros((cells.size, 2 * topo.n_inner + 2))
    means[:, topo.n_leaves:] = cells.theta_h
    for node in range(topo.n_inner, 0, -1):
        means[:, node] = 0.5 * (means[:, 2 * node] + means[:, 2 * node + 1])
    return means


def layer_action_distributions(agent: AgentNet, cache_reach: np.ndarray) -> np.ndarray:
    """Per-level action distributions along the tree.

    Level ``m`` projects each tree's reach mass at that level through the
    mean leaf scalar of the corresponding subtrees and the action read-out,
    then softmax-normalizes; the deepest level reproduces the softmax of
    the actual action values.
    """
    topo = agent.topology
    means = _subtree_leaf_means(agent.cells)
    dists = np.zeros((topo.depth + 1, agent.layout.n_actions))
    for level in range(topo.depth + 1):
        ids = np.array(list(topo.level_nodes(level)))
        h_partial = (cache_reach[:, ids] * means[:, ids]).sum(axis=1)  # (H,)
        q_partial = h_partial @ agent.w_q
        shifted = q_partial - q_partial.max()
        e = np.exp(shifted)
        dists[level] = e / e.sum()
    return dists


@dataclass
class TraceStep:
    """Everything recorded for one (timestep, agent) pair."""

    t: int
    agent: int
    chosen_action: int
    q: np.ndarray                 # (n_actions,)
    weight: float
    importance: np.ndarray        # (input_dim,)
    node_probs: np.ndarray        # (H, n_inner)
    leaf_probs: np.ndarray        # (H, n_leaves)
    layer_distributions: np.ndarray  # (depth + 1, n_actions)
    hidden_in: np.ndarray         # (H,)


@dataclass
class DecisionTrace:
    method: str
    feature_names: list[str]
    steps: list[TraceStep] = field(default_factory=list)

    def step(self, t: int, agent: int) -> TraceStep:
        for s in self.steps:
            if s.t == t and s.agent == agent:
                return s
        raise KeyError((t, agent))


def trace_decision(agent: AgentNet, mixer: MixerNet, episode: Episode,
                   method: str = "confidence",
                   obs_names: Optional[list[str]] = None) -> DecisionTrace:
    """Replay a recorded episode and serialize the decision process."""
    if method not in IMPORTANCE_METHODS:
        raise ConfigurationError(
            f"unknown importance method {method!r}; expected one of {IMPORTANCE_METHODS}"
        )
    layout = agent.layout
    n = layout.n_agents
    if episode.obs.shape[1] != n or episode.obs.shape[2] != layout.obs_dim:
        raise ConfigurationError("episode dimensions do not match the agent layout")
    trace = DecisionTrace(method=method, feature_names=layout.feature_names(obs_names))
    h = np.zeros((n, agent.size))
    for t in range(episode.length):
        prev = episode.actions[t - 1][None, :] if t > 0 else None
        x = build_step_inputs(layout, episode.obs[t][None], prev)
        q, h_new, cache = agent_q_batch(agent, x, h if agent.recurrent else None)
        chosen = episode.actions[t]
        q_chosen = q[np.arange(n), chosen]
        if mixer.mode == "mixrts":
            weights = mixing_weights(mixer, q_chosen, episode.state[t])
        else:
            weights = np.ones(n)
        for i in range(n):
            hidden_i = h[i] if agent.recurrent else None
            imp = compute_importance(method, agent, x[i], hidden_i, int(chosen[i]))
            trace.steps.append(TraceStep(
                t=t, agent=i, chosen_action=int(chosen[i]), q=q[i].copy(),
                weight=float(weights[i]), importance=imp,
                node_probs=cache.p[i].copy(), leaf_probs=cache.leaf_probs()[i].copy(),
                layer_distributions=layer_action_distributions(agent, cache.reach[i]),
                hidden_in=h[i].copy(),
            ))
        h = h_new
    return trace


def write_importance_csv(trace: DecisionTrace, path) -> None:
    lines = ["t,agent,feature_index,feature_name,importance,method"]
    for s in trace.steps:
        for idx, name in enumerate(trace.feature_names):
            lines.append(
                f"{s.t},{s.agent},{idx},{name},{float(s.importance[idx])!r},{trace.method}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


def write_weights_csv(trace: DecisionTrace, path) -> None:
    lines = ["t,agent,weight"]
    for s in trace.steps:
        lines.append(f"{s.t},{s.agent},{float(s.weight)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_layers_json(trace: DecisionTrace, path) -> None:
    doc = {
        "method": trace.method,
        "layer_distribution_note": (
            "level m mixes each tree's reach mass at that level through the mean "
            "leaf value of the subtree below each node and the action read-out, "
            "then softmax-normalizes; the deepest level is the softmax of the "
            "actual action values"
        ),
        "steps": [
            {
                "t": s.t,
                "agent": s.agent,
                "chosen_action": s.chosen_action,
                "q": [float(v) for v in s.q],
                "weight": float(s.weight),
                "node_probs": s.node_probs.tolist(),
                "leaf_probs": s.leaf_probs.tolist(),
                "layer_distributions": s.layer_distributions.tolist(),
            }
            for s in trace.steps
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# tree dumps
# ---------------------------------------------------------------------------

DUMP_SCHEMA_VERSION = 1


def _split_filters(w_row: np.ndarray, groups: dict[str, slice]) -> dict:
    return {name: [float(v) for v in w_row[sl]] for name, sl in groups.items()}


def _ensemble_doc(cells: TreeEnsemble, groups: dict[str, slice]) -> list[dict]:
    topo = cells.topology
    trees = []
    for k in range(cells.size):
        nodes = []
        for j in range(1, topo.n_inner + 1):
            node = {"node": j, "bias": float(cells.b[k, j - 1])}
            node.update(_split_filters(cells.w_o[k, j - 1], groups))
            if cells.w_h is not None:
                node["hidden"] = [float(cells.w_h[k, j - 1])]
            nodes.append(node)
        trees.append({
            "nodes": nodes,
            "leaves": [float(v) for v in cells.theta_h[k]],
        })
    return trees


def dump_tree(checkpoint: Checkpoint, obs_names: Optional[list[str]] = None) -> dict:
    """Structured document of every learned parameter, filters split into
    named feature groups; loads back losslessly."""
    agent, mixer = checkpoint.agent, checkpoint.mixer
    layout = agent.layout
    names = layout.feature_names(obs_names or checkpoint.meta.get("obs_feature_names"))
    groups = {name: sl for name, sl in layout.groups().items()}
    doc = {
        "schema_version": DUMP_SCHEMA_VERSION,
        "meta": checkpoint.meta,
        "feature_names": names,
        "feature_groups": {name: names[sl] for name, sl in groups.items()},
        "agent": {
            "depth": agent.topology.depth,
            "ensemble": agent.size,
            "recurrent": agent.recurrent,
            "trees": _ensemble_doc(agent.cells, groups),
            "w_q": [[float(v) for v in row] for row in agent.w_q],
        },
        "mixer": {"mode": mixer.mode},
    }
    if mixer.mode == "mixrts":
        mix_groups = {"value": slice(0, 1), "state": slice(1, 1 + mixer.state_dim)}
        doc["mixer"].update({
            "depth": mixer.topology.depth,
            "ensemble": mixer.size,
            "state_dim": mixer.state_dim,
            "trees": _ensemble_doc(mixer.cells, mix_groups),
            "w_phi": [float(v) for v in mixer.w_phi],
        })
    return doc


def _ensemble_from_doc(trees_doc: list[dict], topology: TreeTopology,
                       group_order: list[str], recurrent: bool) -> TreeEnsemble:
    size = len(trees_doc)
    in_dim = sum(len(trees_doc[0]["nodes"][0][g]) for g in group_order)
    w_o = np.zeros((size, topology.n_inner, in_dim))
    b = np.zeros((size, topology.n_inner))
    w_h = np.zeros((size, topology.n_inner)) if recurrent else None
    theta_h = np.zeros((size, topology.n_leaves))
    for k, tree in enumerate(trees_doc):
        for j, node in enumerate(tree["nodes"]):
            w_o[k, j] = np.concatenate([np.asarray(node[g], dtype=np.float64)
                                        for g in group_order])
            b[k, j] = node["bias"]
            if recurrent:
                w_h[k, j] = node["hidden"][0]
        theta_h[k] = tree["leaves"]
    return TreeEnsemble(topology=topology, w_o=w_o, b=b, w_h=w_h, theta_h=theta_h)


def load_tree_dump(doc: dict):
    """Rebuild (agent, mixer) parameter sets from a dump document."""
    version = doc.get("schema_version")
    if version != DUMP_SCHEMA_VERSION:
        raise ConfigurationError(
            f"dump schema mismatch: found {version}, expected {DUMP_SCHEMA_VERSION}"
        )
    from .agent import AgentNet, InputLayout  # local import to avoid cycles at startup

    meta = doc["meta"]
    layout = InputLayout(obs_dim=meta["obs_dim"], n_actions=meta["n_actions"],
                         n_agents=meta["n_agents"])
    agent_doc = doc["agent"]
    cells = _ensemble_from_doc(agent_doc["trees"], TreeTopology(agent_doc["depth"]),
                               ["obs", "prev_action", "role"], agent_doc["recurrent"])
    agent = AgentNet(layout=layout, cells=cells,
                     w_q=np.asarray(agent_doc["w_q"], dtype=np.float64))
    mixer_doc = doc["mixer"]
    if mixer_doc["mode"] != "mixrts":
        mixer = MixerNet(mode=mixer_doc["mode"], state_dim=meta["state_dim"])
    else:
        mix_cells = _ensemble_from_doc(mixer_doc["trees"],
                                       TreeTopology(mixer_doc["depth"]),
                                       ["value", "state"], recurrent=False)
        mixer = MixerNet(mode="mixrts", state_dim=mixer_doc["state_dim"],
                         cells=mix_cells,
                         w_phi=np.asarray(mixer_doc["w_phi"], dtype=np.float64))
    return agent, mixer


def dump_tree_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
