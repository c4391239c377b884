"""State-conditioned linear mixing of per-agent values into a team value.

In the full mode an ensemble of non-recurrent trees scores each agent
from (that agent's chosen-action value, global state); the per-agent
scores pass through a softmax so the mixing weights are positive and sum
to one, and the team value is the weighted sum of the agent values. The
two baseline modes skip the trees: plain summation, or no mixing at all
(each agent learns against its own target).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .trees import (
    CellCache,
    CellGrads,
    TreeEnsemble,
    TreeTopology,
    cell_backward,
    cell_forward,
    init_ensemble,
    tree_param_count,
)

MIXER_MODES = ("mixrts", "vdn_sum", "independent")


@dataclass
class MixerNet:
    """Mixing-tree ensemble shared across agents; parameter-free in the
    baseline modes."""

    mode: str
    state_dim: int
    cells: Optional[TreeEnsemble] = None
    w_phi: Optional[np.ndarray] = None  # (H_mix,)

    @property
    def size(self) -> int:
        return 0 if self.cells is None else self.cells.size

    @property
    def topology(self) -> Optional[TreeTopology]:
        return None if self.cells is None else self.cells.topology

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        if self.mode != "mixrts":
            return []
        return [("mixer/w_o", self.cells.w_o), ("mixer/b", self.cells.b),
                ("mixer/theta_h", self.cells.theta_h), ("mixer/w_phi", self.w_phi)]

    @property
    def n_params(self) -> int:
        return sum(arr.size for _, arr in self.param_items())

    def copy(self) -> "MixerNet":
        if self.mode != "mixrts":
            return MixerNet(mode=self.mode, state_dim=self.state_dim)
        cells = TreeEnsemble(
            topology=self.cells.topology,
            w_o=self.cells.w_o.copy(),
            b=self.cells.b.copy(),
            w_h=None,
            theta_h=self.cells.theta_h.copy(),
        )
        return MixerNet(mode=self.mode, state_dim=self.state_dim, cells=cells,
                        w_phi=self.w_phi.copy())

    def load_from(self, other: "MixerNet") -> None:
        for (_, dst), (_, src) in zip(self.param_items(), other.param_items()):
            np.copyto(dst, src)


def mixer_param_count(state_dim: int, depth: int, size: int, mode: str = "mixrts") -> int:
    if mode != "mixrts":
        return 0
    return size * tree_param_count(depth, 1 + state_dim, 0) + size


def init_mixer(rng: np.random.Generator, mode: str, state_dim: int,
               depth: int, size: int) -> MixerNet:
    if mode not in MIXER_MODES:
        raise ConfigurationError(f"mixer mode must be one of {MIXER_MODES}, got {mode!r}")
    if mode != "mixrts":
        return MixerNet(mode=mode, state_dim=state_dim)
    topology = TreeTopology(depth)
    cells = init_ensemble(rng, topology, size, 1 + state_dim, recurrent=False)
    bound = 1.0 / np.sqrt(size)
    w_phi = rng.uniform(-bound, bound, size=size)
    return MixerNet(mode=mode, state_dim=state_dim, cells=cells, w_phi=w_phi)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class MixCache:
    q: np.ndarray        # (B, n)
    w: np.ndarray        # (B, n)
    phi: np.ndarray      # (B * n, H_mix)
    logits: np.ndarray   # (B, n)
    cell_cache: CellCache


def mixing_weights_batch(mixer: MixerNet, q: np.ndarray,
                         state: np.ndarray) -> tuple[np.ndarray, MixCache]:
    """Positive, sum-to-one weights per row of (agent values, state)."""
    if mixer.mode != "mixrts":
        raise ConfigurationError("mixing weights are only defined in mixrts mode")
    if state.shape[1] != mixer.state_dim:
        raise ConfigurationError(
            f"state width {state.shape[1]} does not match mixer {mixer.state_dim}"
        )
    b, n = q.shape
    x = np.concatenate(
        [q.reshape(b * n, 1), np.repeat(state, n, axis=0)], axis=1
    )
    phi, cell_cache = cell_forward(mixer.cells, x, None)
    logits = (phi @ mixer.w_phi).reshape(b, n)
    w = _softmax_rows(logits)
    return w, MixCache(q=q, w=w, phi=phi, logits=logits, cell_cache=cell_cache)


def mixing_weights(mixer: MixerNet, q_chosen: np.ndarray, state: np.ndarray) -> np.ndarray:
    """Single-instance wrapper around the batched weight computation."""
    q = np.asarray(q_chosen, dtype=np.float64)[None, :]
    s = np.asarray(state, dtype=np.float64)[None, :]
    w, _ = mixing_weights_batch(mixer, q, s)
    return w[0]


def q_tot(w: np.ndarray, q_chosen: np.ndarray) -> float:
    """Weighted team value; callers pass all-ones weights for plain summation."""
    w = np.asarray(w, dtype=np.float64)
    q_chosen = np.asarray(q_chosen, dtype=np.float64)
    if w.shape != q_chosen.shape:
        raise ConfigurationError(f"weight shape {w.shape} != value shape {q_chosen.shape}")
    return float(w @ q_chosen)


def monotonicity_gradient(mixer: MixerNet, q_chosen: np.ndarray,
                          state: np.ndarray) -> np.ndarray:
    """Partial derivatives of the team value in each agent value with the
    weights held fixed; identical to the mixing weights, hence positive."""
    return mixing_weights(mixer, q_chosen, state)


def mix_forward(mixer: MixerNet, q: np.ndarray, state: np.ndarray):
    """Team value per batch row. Returns (q_tot (B,), cache-or-None)."""
    if mixer.mode == "vdn_sum":
        return q.sum(axis=1), None
    if mixer.mode == "mixrts":
        w, cache = mixing_weights_batch(mixer, q, state)
        return (w * q).sum(axis=1), cache
    raise ConfigurationError("independent mode has no mixed team value")


def mix_backward(mixer: MixerNet, cache: Optional[MixCache],
                 d_qtot: np.ndarray) -> tuple[np.ndarray, Optional[CellGrads], Optional[np.ndarray]]:
    """Backward through the team value.

    Returns (d_q (B, n), mixing-tree grads or None, d_w_phi or None).
    Gradient flows through both the direct value path and the weight path.
    """
    if mixer.mode != "mixrts":
        raise ConfigurationError("mix_backward only applies to the mixrts mode")
    w, q = cache.w, cache.q
    bsz, n = q.shape
    d_q = d_qtot[:, None] * w
    d_w = d_qtot[:, None] * q
    d_logits = w * (d_w - (w * d_w).sum(axis=1, keepdims=True))
    d_logits_flat = d_logits.reshape(bsz * n, 1)
    d_phi = d_logits_flat * mixer.w_phi[None, :]
    g_w_phi = (cache.phi * d_logits_flat).sum(axis=0)
    dx, _, cell_grads = cell_backward(mixer.cells, cache.cell_cache, d_phi)
    d_q = d_q + dx[:, 0].reshape(bsz, n)
    return d_q, cell_grads, g_w_phi


def mix_backward_vdn(d_qtot: np.ndarray, n_agents: int) -> np.ndarray:
    return np.repeat(d_qtot[:, None], n_agents, axis=1)
