"""Centralized training loop with decentralized execution.

Whole episodes are replayed so the recurrent cells can thread their
hidden scalars from the first step; the squared TD error against a
periodically synchronized target copy is backpropagated through time,
through the action read-out and through the mixing trees. Padding steps
are masked out of the loss exactly, and every random draw flows from one
seed, so runs are reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
import struct
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .agent import (
    AgentNet,
    InputLayout,
    agent_backward_step,
    agent_q_batch,
    init_agent_net,
    select_action,
)
from .envs import Env, EnvSpec
from .errors import (
    CheckpointError,
    ConfigurationError,
    EnvContractError,
    EpisodeError,
    NumericError,
)
from .mixer import (
    MIXER_MODES,
    MixerNet,
    init_mixer,
    mix_backward,
    mix_backward_vdn,
    mix_forward,
    mixing_weights_batch,
)

AGENT_TREE_MODES = ("rtc", "sdt")


@dataclass
class TrainConfig:
    """Training hyperparameters; the numeric defaults are the bundled
    experiment settings."""

    gamma: float = 0.99
    lr: float = 0.0005
    batch_size: int = 32
    buffer_capacity_episodes: int = 5000
    target_update_episodes: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_steps: int = 50000
    depth_agent: int = 3
    depth_mix: int = 3
    h_agent: int = 32
    h_mix: int = 16
    grad_clip_norm: float = 10.0
    seed: int = 1
    total_steps: int = 50000
    mixer_mode: str = "mixrts"
    agent_trees: str = "rtc"
    updates_per_episode: int = 1
    eval_cycle_steps: int = 5000
    eval_episodes: int = 32
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8

    def validate(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.lr <= 0.0:
            raise ConfigurationError("lr must be positive")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ConfigurationError("need 0 <= eps_end <= eps_start <= 1")
        for name in ("batch_size", "buffer_capacity_episodes", "target_update_episodes",
                     "eps_anneal_steps", "depth_agent", "depth_mix", "h_agent", "h_mix",
                     "updates_per_episode", "eval_cycle_steps", "eval_episodes"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.total_steps < 0:
            raise ConfigurationError("total_steps must be >= 0")
        if self.grad_clip_norm < 0.0:
            raise ConfigurationError("grad_clip_norm must be >= 0")
        if self.mixer_mode not in MIXER_MODES:
            raise ConfigurationError(f"mixer_mode must be one of {MIXER_MODES}")
        if self.agent_trees not in AGENT_TREE_MODES:
            raise ConfigurationError(f"agent_trees must be one of {AGENT_TREE_MODES}")

    def epsilon(self, t: int) -> float:
        return epsilon(t, self.eps_start, self.eps_end, self.eps_anneal_steps)


def epsilon(t: int, eps_start: float, eps_end: float, anneal_steps: int) -> float:
    """Linear anneal from start to end over ``anneal_steps`` env steps."""
    if t < 0:
        raise ConfigurationError("step count must be >= 0")
    frac = min(t, anneal_steps) / anneal_steps
    return eps_start - (eps_start - eps_end) * frac


# ---------------------------------------------------------------------------
# episodes and replay
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    """One whole episode; observation/state/avail arrays carry one extra
    trailing slot for the post-terminal step so targets can bootstrap."""

    obs: np.ndarray         # (T + 1, n, obs_dim)
    state: np.ndarray       # (T + 1, state_dim)
    avail: np.ndarray       # (T + 1, n, n_actions) bool
    actions: np.ndarray     # (T, n) int64
    reward: np.ndarray      # (T,)
    terminated: np.ndarray  # (T,) bool

    @property
    def length(self) -> int:
        return self.reward.shape[0]

    @property
    def total_return(self) -> float:
        return float(self.reward.sum())


def validate_episode(episode: Episode, spec: EnvSpec) -> None:
    t = episode.length
    n, a = spec.n_agents, spec.n_actions
    if t < 1 or t > spec.episode_limit:
        raise EpisodeError(f"episode length {t} outside [1, {spec.episode_limit}]")
    if episode.obs.shape != (t + 1, n, spec.obs_dim):
        raise EpisodeError(f"obs shape {episode.obs.shape} malformed")
    if episode.state.shape != (t + 1, spec.state_dim):
        raise EpisodeError(f"state shape {episode.state.shape} malformed")
    if episode.avail.shape != (t + 1, n, a):
        raise EpisodeError(f"avail shape {episode.avail.shape} malformed")
    if episode.actions.shape != (t, n):
        raise EpisodeError(f"actions shape {episode.actions.shape} malformed")
    if not np.all(np.isfinite(episode.reward)):
        raise EpisodeError("rewards must be finite")
    if not episode.avail.any(axis=2).all():
        raise EpisodeError("every availability mask needs at least one action")
    taken_avail = np.take_along_axis(
        episode.avail[:t], episode.actions[:, :, None], axis=2
    )
    if not taken_avail.all():
        raise EpisodeError("episode contains an action that was not available")
    if not episode.terminated[-1]:
        raise EpisodeError("episode must end terminated")
    if episode.terminated[:-1].any():
        raise EpisodeError("terminated may only be set on the final step")


@dataclass
class EpisodeBatch:
    """Episodes padded to a common horizon; ``filled`` is a prefix mask."""

    obs: np.ndarray         # (B, T + 1, n, obs_dim)
    state: np.ndarray       # (B, T + 1, state_dim)
    avail: np.ndarray       # (B, T + 1, n, n_actions) bool
    actions: np.ndarray     # (B, T, n)
    reward: np.ndarray      # (B, T)
    terminated: np.ndarray  # (B, T)
    filled: np.ndarray      # (B, T) float 0/1

    @property
    def batch_size(self) -> int:
        return self.reward.shape[0]

    @property
    def horizon(self) -> int:
        return self.reward.shape[1]


def batch_episodes(episodes: list[Episode], horizon: int) -> EpisodeBatch:
    b = len(episodes)
    n, obs_dim = episodes[0].obs.shape[1:]
    a = episodes[0].avail.shape[2]
    s = episodes[0].state.shape[1]
    obs = np.zeros((b, horizon + 1, n, obs_dim))
    state = np.zeros((b, horizon + 1, s))
    avail = np.zeros((b, horizon + 1, n, a), dtype=bool)
    avail[:, :, :, 0] = True  # keep padded masks valid
    actions = np.zeros((b, horizon, n), dtype=np.int64)
    reward = np.zeros((b, horizon))
    terminated = np.zeros((b, horizon), dtype=bool)
    filled = np.zeros((b, horizon))
    for i, ep in enumerate(episodes):
        t = ep.length
        obs[i, :t + 1] = ep.obs
        state[i, :t + 1] = ep.state
        avail[i, :t + 1] = ep.avail
        actions[i, :t] = ep.actions
        reward[i, :t] = ep.reward
        terminated[i, :t] = ep.terminated
        filled[i, :t] = 1.0
    return EpisodeBatch(obs=obs, state=state, avail=avail, actions=actions,
                        reward=reward, terminated=terminated, filled=filled)


class ReplayBuffer:
    """FIFO store of whole episodes."""

    def __init__(self, capacity: int, spec: EnvSpec):
        if capacity < 1:
            raise ConfigurationError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.spec = spec
        self._episodes: deque[Episode] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._episodes)

    def push(self, episode: Episode) -> None:
        validate_episode(episode, self.spec)
        self._episodes.append(episode)

    def episodes(self) -> list[Episode]:
        return list(self._episodes)

    def sample(self, rng: np.random.Generator, batch_size: int) -> EpisodeBatch:
        if batch_size > len(self._episodes):
            raise ConfigurationError(
                f"cannot sample {batch_size} episodes from buffer of {len(self._episodes)}"
            )
        idx = rng.choice(len(self._episodes), size=batch_size, replace=False)
        chosen = [self._episodes[int(i)] for i in idx]
        return batch_episodes(chosen, self.spec.episode_limit)


# ---------------------------------------------------------------------------
# batched inputs, targets and the loss
# ---------------------------------------------------------------------------


def build_step_inputs(layout: InputLayout, obs_t: np.ndarray,
                      prev_actions: Optional[np.ndarray]) -> np.ndarray:
    """Stack per-agent inputs for one timestep.

    ``obs_t`` is (B, n, obs_dim); ``prev_actions`` is (B, n) or None at the
    first step. Rows come out agent-minor: row ``b * n + i`` is agent i of
    episode b.
    """
    b, n, _ = obs_t.shape
    rows = b * n
    x = np.zeros((rows, layout.input_dim))
    x[:, layout.obs_slice] = obs_t.reshape(rows, layout.obs_dim)
    if prev_actions is not None:
        onehot = x[:, layout.action_slice]
        onehot[np.arange(rows), prev_actions.reshape(rows)] = 1.0
    x[:, layout.role_slice] = np.tile(np.eye(layout.n_agents), (b, 1))
    return x


def _unroll_q(net: AgentNet, batch: EpisodeBatch, upto: int):
    """Forward the agent over timesteps [0, upto); returns per-step action
    values (list of (B*n, A)) and caches."""
    b = batch.batch_size
    n = net.layout.n_agents
    h = np.zeros((b * n, net.size))
    qs, caches = [], []
    for t in range(upto):
        prev = batch.actions[:, t - 1] if t > 0 else None
        x = build_step_inputs(net.layout, batch.obs[:, t], prev)
        q, h, cache = agent_q_batch(net, x, h)
        qs.append(q)
        caches.append(cache)
    return qs, caches


def td_targets(batch: EpisodeBatch, agent_target: AgentNet, mixer_target: MixerNet,
               gamma: float) -> np.ndarray:
    """Bootstrapped targets from the frozen copies.

    Greedy next actions are taken per agent (decentralized maximization);
    in mixrts mode the weights are evaluated at those greedy values.
    Returns (B, T) for the mixed modes or (B, T, n) when each agent keeps
    its own target.
    """
    b, t_max = batch.reward.shape
    n = agent_target.layout.n_agents
    a = agent_target.layout.n_actions
    qs, _ = _unroll_q(agent_target, batch, t_max + 1)
    q_next = np.zeros((b, t_max, n))
    for t in range(1, t_max + 1):
        avail = batch.avail[:, t].reshape(b * n, a)
        masked = np.where(avail, qs[t], -np.inf)
        q_next[:, t - 1] = masked.max(axis=1).reshape(b, n)
    not_terminal = 1.0 - batch.terminated.astype(np.float64)
    if mixer_target.mode == "independent":
        return batch.reward[:, :, None] + gamma * not_terminal[:, :, None] * q_next
    if mixer_target.mode == "vdn_sum":
        qtot_next = q_next.sum(axis=2)
    else:
        w, _ = mixing_weights_batch(
            mixer_target,
            q_next.reshape(b * t_max, n),
            batch.state[:, 1:t_max + 1].reshape(b * t_max, -1),
        )
        qtot_next = (w * q_next.reshape(b * t_max, n)).sum(axis=1).reshape(b, t_max)
    return batch.reward + gamma * not_terminal * qtot_next


@dataclass
class LossAux:
    """Intermediate values exposed for tests and diagnostics."""

    q_taken: np.ndarray
    q_tot: Optional[np.ndarray]
    d_qtot: Optional[np.ndarray]
    n_filled: float


def zero_grads(agent: AgentNet, mixer: MixerNet) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr)
            for name, arr in agent.param_items() + mixer.param_items()}


def loss_and_grads(batch: EpisodeBatch, agent: AgentNet, mixer: MixerNet,
                   targets: np.ndarray):
    """Masked squared TD error and its gradients for every parameter.

    The targets are treated as constants; gradients flow through the
    hidden-state chain across the whole episode, the action read-out and
    (in mixrts mode) both the value and the weight path of the mixer.
    """
    b, t_max = batch.reward.shape
    n = agent.layout.n_agents
    a = agent.layout.n_actions
    rows = b * n
    filled = batch.filled
    n_filled = float(filled.sum())
    if n_filled <= 0:
        raise ConfigurationError("batch has no filled steps")

    qs, caches = _unroll_q(agent, batch, t_max)
    q_taken = np.zeros((b, t_max, n))
    for t in range(t_max):
        taken = batch.actions[:, t].reshape(rows)
        q_taken[:, t] = qs[t][np.arange(rows), taken].reshape(b, n)

    grads = zero_grads(agent, mixer)
    mix_cache = None
    if mixer.mode == "independent":
        resid = (q_taken - targets) * filled[:, :, None]
        denom = n_filled * n
        loss = 0.0
        for t in range(t_max):
            loss += float(np.sum(resid[:, t] ** 2))
        loss /= denom
        d_q_taken = 2.0 * resid / denom
        qtot = None
        d_qtot = None
    else:
        if mixer.mode == "vdn_sum":
            qtot = q_taken.sum(axis=2)
        else:
            qtot_flat, mix_cache = mix_forward(
                mixer,
                q_taken.reshape(b * t_max, n),
                batch.state[:, :t_max].reshape(b * t_max, -1),
            )
            qtot = qtot_flat.reshape(b, t_max)
        resid = (qtot - targets) * filled
        loss = 0.0
        for t in range(t_max):
            loss += float(np.sum(resid[:, t] ** 2))
        loss /= n_filled
        d_qtot = 2.0 * resid / n_filled
        if mixer.mode == "vdn_sum":
            d_q_taken = mix_backward_vdn(d_qtot.reshape(b * t_max), n).reshape(b, t_max, n)
        else:
            d_q_flat, mix_cell_grads, g_w_phi = mix_backward(
                mixer, mix_cache, d_qtot.reshape(b * t_max)
            )
            d_q_taken = d_q_flat.reshape(b, t_max, n)
            grads["mixer/w_o"] += mix_cell_grads.w_o
            grads["mixer/b"] += mix_cell_grads.b
            grads["mixer/theta_h"] += mix_cell_grads.theta_h
            grads["mixer/w_phi"] += g_w_phi

    d_h = None
    for t in reversed(range(t_max)):
        d_q_rows = np.zeros((rows, a))
        taken = batch.actions[:, t].reshape(rows)
        d_q_rows[np.arange(rows), taken] = d_q_taken[:, t].reshape(rows)
        _, d_h, step_grads = agent_backward_step(agent, caches[t], d_q_rows, d_h)
        grads["agent/w_o"] += step_grads.cells.w_o
        grads["agent/b"] += step_grads.cells.b
        if step_grads.cells.w_h is not None:
            grads["agent/w_h"] += step_grads.cells.w_h
        grads["agent/theta_h"] += step_grads.cells.theta_h
        grads["agent/w_q"] += step_grads.w_q

    aux = LossAux(q_taken=q_taken, q_tot=qtot, d_qtot=d_qtot, n_filled=n_filled)
    return loss, grads, aux


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class RMSprop:
    """Root-mean-square gradient scaling with global-norm clipping first."""

    def __init__(self, lr: float, decay: float = 0.99, eps: float = 1e-8,
                 clip_norm: float = 0.0):
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.clip_norm = clip_norm
        self.state: dict[str, np.ndarray] = {}

    def step(self, params: list[tuple[str, np.ndarray]],
             grads: dict[str, np.ndarray]) -> float:
        """Apply one update in place; returns the pre-clip gradient norm."""
        sq = 0.0
        for name, _ in params:
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}; aborting the step")
            sq += float(np.sum(g * g))
        norm = math.sqrt(sq)
        scale = 1.0
        if self.clip_norm > 0.0 and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for name, p in params:
            g = grads[name] * scale
            acc = self.state.get(name)
            if acc is None:
                acc = np.zeros_like(p)
                self.state[name] = acc
            acc *= self.decay
            acc += (1.0 - self.decay) * g * g
            p -= self.lr * g / (np.sqrt(acc) + self.eps)
        return norm


# ---------------------------------------------------------------------------
# rollouts and evaluation
# ---------------------------------------------------------------------------


def rollout_episode(env: Env, agent: AgentNet, epsilon_of: Callable[[int], float],
                    start_step: int, rng: np.random.Generator,
                    episode_seed: int) -> Episode:
    """Collect one episode with per-agent epsilon-greedy actions."""
    spec = env.spec
    n = spec.n_agents
    try:
        obs, state = env.reset(episode_seed)
    except EnvContractError as exc:
        raise EnvContractError(f"reset(seed={episode_seed}): {exc}") from exc
    avail = env.avail_actions()
    obs_l, state_l, avail_l = [obs], [state], [avail]
    act_l, rew_l, term_l = [], [], []
    h = np.zeros((n, agent.size))
    prev = None
    t = 0
    while True:
        x = build_step_inputs(agent.layout, obs[None], prev)
        q, h, _ = agent_q_batch(agent, x, h)
        eps = epsilon_of(start_step + t)
        actions = np.array(
            [select_action(q[i], avail[i], eps, rng) for i in range(n)], dtype=np.int64
        )
        try:
            result = env.step(actions)
        except EnvContractError as exc:
            raise EnvContractError(
                f"step t={t} seed={episode_seed} actions={actions.tolist()}: {exc}"
            ) from exc
        act_l.append(actions)
        rew_l.append(result.reward)
        term_l.append(result.terminated)
        obs, state, avail = result.obs, result.state, result.avail
        obs_l.append(obs)
        state_l.append(state)
        avail_l.append(avail)
        prev = actions[None, :]
        t += 1
        if result.terminated:
            break
        if t >= spec.episode_limit:
            raise EnvContractError(
                f"{spec.name}: episode exceeded limit {spec.episode_limit} without terminating"
            )
    return Episode(obs=np.stack(obs_l), state=np.stack(state_l), avail=np.stack(avail_l),
                   actions=np.stack(act_l), reward=np.array(rew_l),
                   terminated=np.array(term_l, dtype=bool))


def evaluate_policy(env: Env, agent: AgentNet, episodes: int, seed: int):
    """Greedy rollouts; returns (mean return, success rate, mean length,
    per-episode returns)."""
    rng = np.random.default_rng(seed)
    ep_seeds = rng.integers(np.iinfo(np.int64).max, size=episodes)
    returns, lengths, wins = [], [], []
    for s in ep_seeds:
        ep = rollout_episode(env, agent, lambda _: 0.0, 0, rng, int(s))
        returns.append(ep.total_return)
        lengths.append(ep.length)
        wins.append(env.is_success())
    return (float(np.mean(returns)), float(np.mean(wins)), float(np.mean(lengths)),
            np.array(returns))


def igm_violation_fraction(agent: AgentNet, mixer: MixerNet, batch: EpisodeBatch,
                           limit: int = 64) -> float:
    """Fraction of sampled filled states where the exhaustive joint argmax of
    the (dynamic-weight) team value disagrees with the per-agent argmaxes.

    Monitoring only: the softmax weights move with the agent values, so
    exact agreement is not guaranteed by construction.
    """
    if mixer.mode != "mixrts":
        return 0.0
    b, t_max = batch.reward.shape
    n = agent.layout.n_agents
    a = agent.layout.n_actions
    if a ** n > 256:
        return float("nan")
    qs, _ = _unroll_q(agent, batch, t_max)
    coords = np.argwhere(batch.filled > 0)
    if coords.shape[0] > limit:
        coords = coords[:limit]
    joint = np.stack(np.meshgrid(*[np.arange(a)] * n, indexing="ij"), axis=-1).reshape(-1, n)
    disagreements = 0
    for bi, t in coords:
        q_bt = qs[t].reshape(b, n, a)[bi]
        avail = batch.avail[bi, t]
        masked = np.where(avail, q_bt, -np.inf)
        greedy = masked.argmax(axis=1)
        ok = avail[np.arange(n)[None, :], joint].all(axis=1)
        chosen = q_bt[np.arange(n)[None, :], joint]
        w, _ = mixing_weights_batch(
            mixer, chosen, np.repeat(batch.state[bi, t][None], joint.shape[0], axis=0)
        )
        qtot = np.where(ok, (w * chosen).sum(axis=1), -np.inf)
        best = joint[int(qtot.argmax())]
        if not np.array_equal(best, greedy):
            disagreements += 1
    return disagreements / coords.shape[0] if coords.shape[0] else float("nan")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MIXRTS1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, config_echo: dict, agent: AgentNet, mixer: MixerNet,
                    meta: dict) -> None:
    """Versioned binary: magic, manifest length, JSON manifest (config echo
    plus array names/shapes), then the raw little-endian float64 arrays in
    manifest order."""
    arrays = agent.param_items() + mixer.param_items()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "config": config_echo,
        "meta": meta,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    config: dict
    meta: dict
    manifest: dict
    agent: AgentNet
    mixer: MixerNet


def _read_header(f) -> dict:
    magic = f.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint (bad magic {magic!r})")
    (length,) = struct.unpack("<Q", f.read(8))
    manifest = json.loads(f.read(length).decode("utf-8"))
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch: found {version}, expected {CHECKPOINT_VERSION}"
        )
    return manifest


def read_manifest(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        manifest = _read_header(f)
        meta = manifest["meta"]
        layout = InputLayout(obs_dim=meta["obs_dim"], n_actions=meta["n_actions"],
                             n_agents=meta["n_agents"])
        rng = np.random.default_rng(0)
        agent = init_agent_net(rng, layout, meta["depth_agent"], meta["h_agent"],
                               recurrent=(meta["agent_trees"] == "rtc"))
        mixer = init_mixer(rng, meta["mixer_mode"], meta["state_dim"],
                           meta["depth_mix"], meta["h_mix"])
        arrays = dict(agent.param_items() + mixer.param_items())
        for entry in manifest["arrays"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in arrays:
                raise CheckpointError(f"unexpected array {name!r} in checkpoint")
            target = arrays[name]
            if target.shape != shape:
                raise CheckpointError(
                    f"array {name!r} shape {shape} does not match expected {target.shape}"
                )
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(count * 8), dtype="<f8", count=count)
            np.copyto(target, data.reshape(shape))
    return Checkpoint(config=manifest.get("config", {}), meta=meta,
                      manifest=manifest, agent=agent, mixer=mixer)


def manifest_param_count(manifest: dict) -> int:
    return sum(int(np.prod(entry["shape"])) for entry in manifest["arrays"])


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


CURVE_HEADER = "step,episodes,mean_test_return,test_win_rate,loss,epsilon"


@dataclass
class EvalRecord:
    step: int
    episodes: int
    mean_test_return: float
    test_win_rate: float
    loss: float
    epsilon: float
    igm_violation: float = float("nan")


def write_curve_csv(records: list[EvalRecord], path) -> None:
    lines = [CURVE_HEADER]
    for r in records:
        lines.append(
            f"{r.step},{r.episodes},{float(r.mean_test_return)!r},"
            f"{float(r.test_win_rate)!r},{float(r.loss)!r},{float(r.epsilon)!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_igm_csv(records: list[EvalRecord], path) -> None:
    lines = ["step,igm_violation_fraction"]
    for r in records:
        lines.append(f"{r.step},{float(r.igm_violation)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class TrainResult:
    records: list[EvalRecord]
    agent: AgentNet
    mixer: MixerNet
    best_return: float
    steps_done: int
    episodes_done: int
    out_dir: Optional[Path] = None


def _checkpoint_meta(config: TrainConfig, env: Env) -> dict:
    spec = env.spec
    return {
        "env": spec.name,
        "obs_dim": spec.obs_dim,
        "n_actions": spec.n_actions,
        "n_agents": spec.n_agents,
        "state_dim": spec.state_dim,
        "episode_limit": spec.episode_limit,
        "obs_feature_names": list(env.obs_feature_names),
        "depth_agent": config.depth_agent,
        "h_agent": config.h_agent,
        "depth_mix": config.depth_mix,
        "h_mix": config.h_mix,
        "mixer_mode": config.mixer_mode,
        "agent_trees": config.agent_trees,
    }


def run_training(config: TrainConfig, env_factory: Callable[[], Env],
                 out_dir=None, config_echo: Optional[dict] = None) -> TrainResult:
    """Alternate rollout, replay and gradient steps; evaluate greedily on a
    fixed cadence and keep latest/best checkpoints when ``out_dir`` is set."""
    config.validate()
    env = env_factory()
    eval_env = env_factory()
    spec = env.spec
    layout = InputLayout(obs_dim=spec.obs_dim, n_actions=spec.n_actions,
                         n_agents=spec.n_agents)

    root = np.random.SeedSequence(config.seed)
    s_init, s_env, s_explore, s_sample, s_eval = root.spawn(5)
    rng_init = np.random.default_rng(s_init)
    rng_env = np.random.default_rng(s_env)
    rng_explore = np.random.default_rng(s_explore)
    rng_sample = np.random.default_rng(s_sample)
    rng_eval = np.random.default_rng(s_eval)

    agent = init_agent_net(rng_init, layout, config.depth_agent, config.h_agent,
                           recurrent=(config.agent_trees == "rtc"))
    mixer = init_mixer(rng_init, config.mixer_mode, spec.state_dim,
                       config.depth_mix, config.h_mix)
    target_agent = agent.copy()
    target_mixer = mixer.copy()
    optimizer = RMSprop(lr=config.lr, decay=config.rmsprop_decay,
                        eps=config.rmsprop_eps, clip_norm=config.grad_clip_norm)
    buffer = ReplayBuffer(config.buffer_capacity_episodes, spec)

    meta = _checkpoint_meta(config, env)
    echo = config_echo if config_echo is not None else asdict(config)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    records: list[EvalRecord] = []
    recent_losses: list[float] = []
    best_return = -np.inf
    steps_done = 0
    episodes_done = 0

    def save(tag: str) -> None:
        if out_path is not None:
            save_checkpoint(out_path / f"ckpt-{tag}", echo, agent, mixer, meta)

    def run_eval() -> None:
        nonlocal best_return
        eval_seed = int(rng_eval.integers(np.iinfo(np.int64).max))
        mean_ret, win_rate, _, _ = evaluate_policy(
            eval_env, agent, config.eval_episodes, eval_seed
        )
        loss_val = float(np.mean(recent_losses)) if recent_losses else float("nan")
        recent_losses.clear()
        igm = float("nan")
        if config.mixer_mode == "mixrts" and len(buffer) >= config.batch_size:
            audit_batch = buffer.sample(rng_eval, config.batch_size)
            igm = igm_violation_fraction(agent, mixer, audit_batch)
        records.append(EvalRecord(
            step=steps_done, episodes=episodes_done, mean_test_return=mean_ret,
            test_win_rate=win_rate, loss=loss_val,
            epsilon=config.epsilon(steps_done), igm_violation=igm,
        ))
        save("latest")
        if mean_ret > best_return:
            best_return = mean_ret
            save("best")

    run_eval()
    next_eval = config.eval_cycle_steps
    while steps_done < config.total_steps:
        ep_seed = int(rng_env.integers(np.iinfo(np.int64).max))
        episode = rollout_episode(env, agent, config.epsilon, steps_done,
                                  rng_explore, ep_seed)
        buffer.push(episode)
        steps_done += episode.length
        episodes_done += 1
        if len(buffer) >= config.batch_size:
            for _ in range(config.updates_per_episode):
                batch = buffer.sample(rng_sample, config.batch_size)
                targets = td_targets(batch, target_agent, target_mixer, config.gamma)
                loss, grads, _ = loss_and_grads(batch, agent, mixer, targets)
                optimizer.step(agent.param_items() + mixer.param_items(), grads)
                recent_losses.append(loss)
        if episodes_done % config.target_update_episodes == 0:
            target_agent.load_from(agent)
            target_mixer.load_from(mixer)
        while steps_done >= next_eval:
            run_eval()
            next_eval += config.eval_cycle_steps
    if not records or records[-1].step != steps_done:
        run_eval()

    if out_path is not None:
        write_curve_csv(records, out_path / "curve.csv")
        if config.mixer_mode == "mixrts":
            write_igm_csv(records, out_path / "igm_audit.csv")
    return TrainResult(records=records, agent=agent, mixer=mixer,
                       best_return=best_return, steps_done=steps_done,
                       episodes_done=episodes_done, out_dir=out_path)
