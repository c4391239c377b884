"""Interpretable cooperative multi-agent Q-learning built from recurrent
soft decision trees with linear, state-conditioned value mixing."""

from .agent import (
    AgentInput,
    AgentNet,
    InputLayout,
    agent_param_count,
    agent_q,
    init_agent_net,
    init_hidden,
    select_action,
)
from .envs import (
    CooperativeMatrixGame,
    EnvSpec,
    MemoryRecallGame,
    PredatorPreyGrid,
    StepResult,
    make_env,
    optimal_matrix_return,
)
from .learner import (
    Episode,
    EpisodeBatch,
    ReplayBuffer,
    RMSprop,
    TrainConfig,
    epsilon,
    evaluate_policy,
    load_checkpoint,
    loss_and_grads,
    rollout_episode,
    run_training,
    save_checkpoint,
    td_targets,
)
from .mixer import (
    MixerNet,
    init_mixer,
    mixer_param_count,
    mixing_weights,
    monotonicity_gradient,
    q_tot,
)
from .trees import (
    HiddenState,
    TreeParams,
    TreeTopology,
    leaf_path_probabilities,
    node_probability,
    rtc_step,
    sdt_forward,
    tree_backward,
    tree_param_count,
)

__version__ = "0.1.0"
