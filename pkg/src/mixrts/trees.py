"""Differentiable binary soft decision trees and recurrent tree cells.

A tree of depth ``d`` has ``2**d - 1`` inner nodes and ``2**d`` leaves.
Nodes are numbered heap-style: the root is node 1 and node ``j`` has
children ``2j`` (left) and ``2j + 1`` (right), so leaves occupy slots
``2**d`` .. ``2**(d+1) - 1``. Each inner node gates left/right with a
sigmoid over a linear filter of the whole input vector; in recurrent mode
the filter additionally sees the cell's previous hidden scalar, and the
leaf scalars mix into the next hidden scalar under the leaf-arrival
distribution.

Everything here is float64 and purely functional: forward passes return
explicit caches, and the backward passes consume them. The batched
"cell" kernels at the bottom run a whole ensemble over a batch of rows
at once; the single-tree operations wrap the same kernels so there is a
single implementation of the math.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, NumericError, UsageError


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class TreeTopology:
    """Shape of a complete binary tree with heap-style node numbering."""

    depth: int

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError(f"tree depth must be >= 1, got {self.depth}")

    @property
    def n_inner(self) -> int:
        return 2 ** self.depth - 1

    @property
    def n_leaves(self) -> int:
        return 2 ** self.depth

    def leaf_node_id(self, leaf: int) -> int:
        """Heap slot of the given leaf (leaves are 0-indexed left to right)."""
        return self.n_leaves + leaf

    def route(self, leaf: int) -> list[tuple[int, bool]]:
        """Inner nodes on the root-to-leaf path as (node_id, goes_left)."""
        node = self.leaf_node_id(leaf)
        steps = []
        while node > 1:
            parent = node // 2
            steps.append((parent, node == 2 * parent))
            node = parent
        steps.reverse()
        return steps

    def level_nodes(self, level: int) -> range:
        """Heap slots at one level; the root is level 0."""
        if not 0 <= level <= self.depth:
            raise ConfigurationError(f"level {level} out of range for depth {self.depth}")
        return range(2 ** level, 2 ** (level + 1))

    def subtree_leaves(self, node: int) -> range:
        """Leaf indices (0-based) under an arbitrary heap slot."""
        level = node.bit_length() - 1
        width = 2 ** (self.depth - level)
        first = (node - 2 ** level) * width
        return range(first, first + width)


@dataclass
class TreeParams:
    """Learnable parameters of a single tree.

    ``theta_h`` (one scalar per leaf) drives the recurrent/value head;
    ``theta`` (one action vector per leaf) drives the classification-style
    head used by plain soft-decision-tree inference. Exactly one of the
    two is populated.
    """

    w_o: np.ndarray                       # (n_inner, in_dim)
    b: np.ndarray                         # (n_inner,)
    w_h: Optional[np.ndarray] = None      # (n_inner, hidden_dim)
    theta_h: Optional[np.ndarray] = None  # (n_leaves,)
    theta: Optional[np.ndarray] = None    # (n_leaves, n_actions)

    @property
    def in_dim(self) -> int:
        return self.w_o.shape[1]

    @property
    def hidden_dim(self) -> int:
        return 0 if self.w_h is None else self.w_h.shape[1]

    def validate(self, topology: TreeTopology) -> None:
        j, l = topology.n_inner, topology.n_leaves
        if self.w_o.shape[0] != j or self.b.shape != (j,):
            raise ConfigurationError(
                f"filter shapes {self.w_o.shape}/{self.b.shape} do not match {j} inner nodes"
            )
        if self.w_h is not None and self.w_h.shape[0] != j:
            raise ConfigurationError("hidden filter row count does not match inner nodes")
        if self.theta_h is not None and self.theta_h.shape != (l,):
            raise ConfigurationError(f"leaf scalars must have shape ({l},)")
        if self.theta is not None and self.theta.shape[0] != l:
            raise ConfigurationError(f"leaf action vectors must have {l} rows")
        for arr in (self.w_o, self.b, self.w_h, self.theta_h, self.theta):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise NumericError("tree parameters must be finite")

    @property
    def n_params(self) -> int:
        total = self.w_o.size + self.b.size
        if self.w_h is not None:
            total += self.w_h.size
        if self.theta_h is not None:
            total += self.theta_h.size
        if self.theta is not None:
            total += self.theta.size
        return total


def tree_param_count(depth: int, in_dim: int, hidden_dim: int) -> int:
    """Closed-form parameter count of one tree with a scalar-leaf head."""
    return (2 ** depth - 1) * (in_dim + hidden_dim + 1) + 2 ** depth


@dataclass
class HiddenState:
    """Per-agent recurrent state: one scalar per ensemble tree."""

    h: np.ndarray  # (ensemble size,)
    t: int = 0


# ---------------------------------------------------------------------------
# single-tree operations
# ---------------------------------------------------------------------------


def _require_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{name} must be finite")


def node_probability(w_o, w_h, b, obs, hidden=None) -> float:
    """Probability of taking the left branch at a single inner node."""
    w_o = np.asarray(w_o, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if w_o.shape != obs.shape:
        raise ConfigurationError(f"filter shape {w_o.shape} does not match input {obs.shape}")
    if (w_h is None) != (hidden is None):
        raise ConfigurationError("hidden input must be present exactly when the hidden filter is")
    _require_finite("obs", obs)
    _require_finite("w_o", w_o)
    _require_finite("b", b)
    z = float(w_o @ obs) + float(b)
    if w_h is not None:
        w_h = np.asarray(w_h, dtype=np.float64)
        hidden = np.asarray(hidden, dtype=np.float64)
        if w_h.shape != hidden.shape:
            raise ConfigurationError(
                f"hidden filter shape {w_h.shape} does not match hidden state {hidden.shape}"
            )
        _require_finite("hidden", hidden)
        _require_finite("w_h", w_h)
        z += float(w_h @ hidden)
    return float(sigmoid(z))


def _node_logits(params: TreeParams, obs, hidden) -> np.ndarray:
    z = params.w_o @ obs + params.b
    if params.w_h is not None:
        z = z + params.w_h @ hidden
    return z


def leaf_path_probabilities(topology, params: TreeParams, obs, hidden=None) -> np.ndarray:
    """Probability of arriving at each leaf; entries sum to one."""
    params.validate(topology)
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (params.in_dim,):
        raise ConfigurationError(f"input shape {obs.shape} does not match filters ({params.in_dim},)")
    if (params.w_h is None) != (hidden is None):
        raise ConfigurationError("hidden input must be present exactly when the hidden filter is")
    _require_finite("obs", obs)
    if hidden is not None:
        hidden = np.atleast_1d(np.asarray(hidden, dtype=np.float64))
        if hidden.shape != (params.hidden_dim,):
            raise ConfigurationError(
                f"hidden shape {hidden.shape} does not match hidden filters ({params.hidden_dim},)"
            )
        _require_finite("hidden", hidden)
    p = sigmoid(_node_logits(params, obs, hidden))
    reach = _reach_probabilities(p)
    return reach[topology.n_leaves:]


@dataclass
class TreeCache:
    """Forward pass record needed by the backward pass of one tree."""

    obs: np.ndarray
    hidden: Optional[np.ndarray]
    node_probs: np.ndarray   # (n_inner,)
    reach: np.ndarray        # (2 * n_inner + 2,), slot 0 unused
    h_new: float

    @property
    def leaf_probs(self) -> np.ndarray:
        return self.reach[(self.node_probs.shape[0] + 1):]


def rtc_forward(topology, params: TreeParams, obs, h_prev: float) -> TreeCache:
    """One recurrent-cell update, keeping the cache for ``tree_backward``."""
    if params.theta_h is None:
        raise ConfigurationError("recurrent step needs scalar leaf parameters")
    if params.w_h is not None and params.hidden_dim != 1:
        raise ConfigurationError("recurrent step expects one hidden scalar per tree")
    hidden = None if params.w_h is None else np.array([h_prev], dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    params.validate(topology)
    if obs.shape != (params.in_dim,):
        raise ConfigurationError(f"input shape {obs.shape} does not match filters ({params.in_dim},)")
    _require_finite("obs", obs)
    if hidden is not None:
        _require_finite("hidden", hidden)
    p = sigmoid(_node_logits(params, obs, hidden))
    reach = _reach_probabilities(p)
    h_new = float(reach[topology.n_leaves:] @ params.theta_h)
    return TreeCache(obs=obs, hidden=hidden, node_probs=p, reach=reach, h_new=h_new)


def rtc_step(topology, params: TreeParams, obs, h_prev: float) -> float:
    """Next hidden scalar: leaf-probability-weighted mix of the leaf scalars."""
    return rtc_forward(topology, params, obs, h_prev).h_new


def sdt_forward(topology, params: TreeParams, obs):
    """Classification-style inference: hard-select the most likely leaf.

    Returns a probability distribution over actions (softmax of the
    selected leaf's action vector) and its greedy action. Ties pick the
    lowest index.
    """
    if params.theta is None:
        raise ConfigurationError("plain tree inference needs per-leaf action vectors")
    leaf_probs = leaf_path_probabilities(topology, params, obs, None)
    l_star = int(np.argmax(leaf_probs))
    logits = params.theta[l_star]
    shifted = logits - logits.max()
    dist = np.exp(shifted)
    dist /= dist.sum()
    return dist, int(np.argmax(dist))


@dataclass
class TreeGrads:
    """Gradients of one cell update with respect to parameters and inputs."""

    w_o: np.ndarray
    b: np.ndarray
    w_h: Optional[np.ndarray]
    theta_h: np.ndarray
    obs: np.ndarray
    hidden: Optional[np.ndarray]


def tree_backward(topology, params: TreeParams, cache: Optional[TreeCache],
                  upstream_grad: float) -> TreeGrads:
    """Analytic gradients of ``h_new`` scaled by ``upstream_grad``."""
    if cache is None:
        raise UsageError("tree_backward requires the cache of a prior forward pass")
    n_leaves = topology.n_leaves
    leaves = cache.reach[n_leaves:]
    d_theta = upstream_grad * leaves
    d_leaf = upstream_grad * params.theta_h
    dp = _reach_backward(cache.node_probs, cache.reach, d_leaf)
    dz = dp * cache.node_probs * (1.0 - cache.node_probs)
    g_w_o = dz[:, None] * cache.obs[None, :]
    g_b = dz.copy()
    d_obs = dz @ params.w_o
    g_w_h = None
    d_hidden = None
    if params.w_h is not None:
        g_w_h = dz[:, None] * cache.hidden[None, :]
        d_hidden = dz @ params.w_h
    return TreeGrads(w_o=g_w_o, b=g_b, w_h=g_w_h, theta_h=d_theta,
                     obs=d_obs, hidden=d_hidden)


# ---------------------------------------------------------------------------
# reach probabilities (shared by single-tree and batched paths)
# ---------------------------------------------------------------------------


def _reach_probabilities(p: np.ndarray) -> np.ndarray:
    """Arrival probability of every heap slot given per-node left-gate probs.

    ``p[..., j-1]`` is the left probability of heap slot ``j``. The result
    has ``2 * n_inner + 2`` slots on the last axis (slot 0 unused); the
    last ``n_inner + 1`` slots are the leaves.
    """
    n_inner = p.shape[-1]
    reach = np.zeros(p.shape[:-1] + (2 * n_inner + 2,), dtype=np.float64)
    reach[..., 1] = 1.0
    for j in range(1, n_inner + 1):
        pj = p[..., j - 1]
        r = reach[..., j]
        reach[..., 2 * j] = r * pj
        reach[..., 2 * j + 1] = r * (1.0 - pj)
    return reach


def _reach_backward(p: np.ndarray, reach: np.ndarray, d_leaf: np.ndarray) -> np.ndarray:
    """Backward through the reach recursion; returns d(node probs)."""
    n_inner = p.shape[-1]
    d_reach = np.zeros_like(reach)
    d_reach[..., n_inner + 1:] = d_leaf
    dp = np.empty_like(p)
    for j in range(n_inner, 0, -1):
        dl = d_reach[..., 2 * j]
        dr = d_reach[..., 2 * j + 1]
        dp[..., j - 1] = (dl - dr) * reach[..., j]
        d_reach[..., j] += dl * p[..., j - 1] + dr * (1.0 - p[..., j - 1])
    return dp


# ---------------------------------------------------------------------------
# batched ensemble kernels
# ---------------------------------------------------------------------------


@dataclass
class TreeEnsemble:
    """A stack of trees with one topology; per-tree hidden inputs are scalars."""

    topology: TreeTopology
    w_o: np.ndarray            # (H, n_inner, in_dim)
    b: np.ndarray              # (H, n_inner)
    w_h: Optional[np.ndarray]  # (H, n_inner) or None for non-recurrent trees
    theta_h: np.ndarray        # (H, n_leaves)

    @property
    def size(self) -> int:
        return self.w_o.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w_o.shape[2]

    @property
    def recurrent(self) -> bool:
        return self.w_h is not None

    def tree(self, k: int) -> TreeParams:
        """Zero-copy single-tree view; mutating it mutates the ensemble."""
        w_h = None if self.w_h is None else self.w_h[k].reshape(-1, 1)
        return TreeParams(w_o=self.w_o[k], b=self.b[k], w_h=w_h, theta_h=self.theta_h[k])

    @property
    def n_params(self) -> int:
        total = self.w_o.size + self.b.size + self.theta_h.size
        if self.w_h is not None:
            total += self.w_h.size
        return total


def init_ensemble(rng: np.random.Generator, topology: TreeTopology, size: int,
                  in_dim: int, recurrent: bool) -> TreeEnsemble:
    """Uniform filter init scaled by fan-in; leaf scalars start at zero."""
    hidden_dim = 1 if recurrent else 0
    bound = 1.0 / np.sqrt(in_dim + hidden_dim + 1)
    j = topology.n_inner
    w_o = rng.uniform(-bound, bound, size=(size, j, in_dim))
    b = rng.uniform(-bound, bound, size=(size, j))
    w_h = rng.uniform(-bound, bound, size=(size, j)) if recurrent else None
    theta_h = np.zeros((size, topology.n_leaves))
    return TreeEnsemble(topology=topology, w_o=w_o, b=b, w_h=w_h, theta_h=theta_h)


@dataclass
class CellCache:
    """Forward record of one batched ensemble update."""

    x: np.ndarray        # (R, in_dim)
    h_in: Optional[np.ndarray]  # (R, H)
    p: np.ndarray        # (R, H, n_inner)
    reach: np.ndarray    # (R, H, 2 * n_inner + 2)
    h_new: np.ndarray    # (R, H)

    def leaf_probs(self) -> np.ndarray:
        return self.reach[..., self.p.shape[-1] + 1:]


@dataclass
class CellGrads:
    w_o: np.ndarray
    b: np.ndarray
    w_h: Optional[np.ndarray]
    theta_h: np.ndarray


def cell_forward(ens: TreeEnsemble, x: np.ndarray,
                 h: Optional[np.ndarray]) -> tuple[np.ndarray, CellCache]:
    """Advance all trees over a batch of rows.

    ``x`` is (rows, in_dim); ``h`` is (rows, H) of per-tree hidden scalars
    (None for non-recurrent ensembles). Returns the new hidden scalars
    (rows, H) and the cache for ``cell_backward``.
    """
    if ens.recurrent and h is None:
        raise ConfigurationError("recurrent ensemble needs previous hidden scalars")
    z = np.tensordot(x, ens.w_o, axes=([1], [2]))  # (R, H, J)
    if ens.recurrent:
        z += h[:, :, None] * ens.w_h[None, :, :]
    z += ens.b[None, :, :]
    p = sigmoid(z)
    reach = _reach_probabilities(p)
    leaves = reach[..., ens.topology.n_leaves:]
    h_new = np.einsum("rhl,hl->rh", leaves, ens.theta_h)
    return h_new, CellCache(x=x, h_in=h, p=p, reach=reach, h_new=h_new)


def cell_backward(ens: TreeEnsemble, cache: CellCache,
                  d_h_new: np.ndarray) -> tuple[np.ndarray, Optional[np.ndarray], CellGrads]:
    """Backward through one batched ensemble update.

    Returns gradients with respect to the input rows, the previous hidden
    scalars (None for non-recurrent ensembles), and the parameters.
    """
    leaves = cache.leaf_probs()
    g_theta = np.einsum("rh,rhl->hl", d_h_new, leaves)
    d_leaf = d_h_new[:, :, None] * ens.theta_h[None, :, :]
    dp = _reach_backward(cache.p, cache.reach, d_leaf)
    dz = dp * cache.p * (1.0 - cache.p)
    g_w_o = np.einsum("rhj,rd->hjd", dz, cache.x)
    g_b = dz.sum(axis=0)
    dx = np.einsum("rhj,hjd->rd", dz, ens.w_o)
    g_w_h = None
    dh = None
    if ens.recurrent:
        g_w_h = np.einsum("rhj,rh->hj", dz, cache.h_in)
        dh = np.einsum("rhj,hj->rh", dz, ens.w_h)
    return dx, dh, CellGrads(w_o=g_w_o, b=g_b, w_h=g_w_h, theta_h=g_theta)
