import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixrts.agent import (
    AgentInput,
    AgentNet,
    InputLayout,
    agent_param_count,
    agent_q,
    agent_q_batch,
    init_agent_net,
    init_hidden,
    make_input,
    select_action,
)
from mixrts.errors import ConfigurationError, EnvContractError
from mixrts.trees import HiddenState, rtc_step

from test_trees import oracle_leaf_probs


LAYOUT = InputLayout(obs_dim=3, n_actions=4, n_agents=2)


def fresh_net(seed=0, depth=2, size=3, layout=LAYOUT, recurrent=True):
    return init_agent_net(np.random.default_rng(seed), layout, depth, size, recurrent)


def random_net(seed=0, **kw):
    net = fresh_net(seed, **kw)
    rng = np.random.default_rng(seed + 1)
    net.cells.theta_h[:] = rng.uniform(-1, 1, net.cells.theta_h.shape)
    return net


def test_layout_slices_cover_input():
    names = LAYOUT.feature_names()
    assert len(names) == LAYOUT.input_dim == 3 + 4 + 2
    assert names[0] == "obs0" and names[3] == "prev_act0" and names[-1] == "role1"


def test_zero_init_network_is_silent():
    net = fresh_net()
    inp = make_input(LAYOUT, [0.3, 0.8, 0.1], 2, 1)
    q, hidden = agent_q(net, inp, HiddenState(h=np.zeros(3)))
    assert np.all(q == 0.0)
    assert hidden.t == 1


def test_single_tree_reduces_to_scalar_readout():
    net = random_net(size=1)
    inp = make_input(LAYOUT, [0.5, 0.5, 0.5], None, 0)
    hid = HiddenState(h=np.array([0.2]))
    q, _ = agent_q(net, inp, hid)
    h_new = rtc_step(net.topology, net.tree(0), inp.concat(), 0.2)
    np.testing.assert_allclose(q, h_new * net.w_q[0], atol=1e-15)


def test_agent_q_matches_per_tree_oracle():
    net = random_net(seed=4, size=3, depth=2)
    rng = np.random.default_rng(9)
    inp = make_input(LAYOUT, rng.uniform(0, 1, 3), 1, 0)
    x = inp.concat()
    hid = rng.uniform(-1, 1, 3)
    q, new = agent_q(net, inp, HiddenState(h=hid.copy()))
    # chain the independent leaf-walk oracle per tree, then the linear read-out
    want = np.zeros(LAYOUT.n_actions)
    for k in range(3):
        tree = net.tree(k)
        leaf = oracle_leaf_probs(net.topology, tree, x, [hid[k]])
        h_k = float(leaf @ tree.theta_h)
        assert abs(new.h[k] - h_k) < 1e-12
        want += h_k * net.w_q[k]
    assert np.max(np.abs(q - want)) < 1e-12


def test_agent_input_validation():
    bad_prev = AgentInput(obs=np.zeros(3), prev_action=np.array([1.0, 1.0, 0, 0]),
                          role=np.array([1.0, 0.0]))
    with pytest.raises(ConfigurationError):
        bad_prev.validate(LAYOUT)
    bad_role = AgentInput(obs=np.zeros(3), prev_action=np.zeros(4), role=np.zeros(2))
    with pytest.raises(ConfigurationError):
        bad_role.validate(LAYOUT)
    ok = AgentInput(obs=np.zeros(3), prev_action=np.zeros(4), role=np.array([0.0, 1.0]))
    ok.validate(LAYOUT)


def test_hidden_length_checked():
    net = fresh_net()
    inp = make_input(LAYOUT, np.zeros(3), None, 0)
    with pytest.raises(ConfigurationError):
        agent_q(net, inp, HiddenState(h=np.zeros(5)))


def test_init_hidden():
    states = init_hidden(4, 2)
    assert len(states) == 2
    for s in states:
        assert s.t == 0 and s.h.shape == (4,) and np.all(s.h == 0.0)
    one = init_hidden(1, 1)
    assert one[0].h.shape == (1,)
    with pytest.raises(ConfigurationError):
        init_hidden(0, 2)


def test_permutation_equivariance_bit_identical():
    net = random_net(seed=2)
    rng = np.random.default_rng(6)
    obs = rng.uniform(0, 1, (2, 3))
    prev = [1, 3]
    roles = [0, 1]
    hid = rng.uniform(-1, 1, (2, 3))
    x = np.stack([make_input(LAYOUT, obs[i], prev[i], roles[i]).concat() for i in (0, 1)])
    q, h_new, _ = agent_q_batch(net, x, hid)
    # swap the two agents' full (obs, prev action, role, hidden) tuples
    x_sw = np.stack([make_input(LAYOUT, obs[i], prev[i], roles[i]).concat() for i in (1, 0)])
    q_sw, h_sw, _ = agent_q_batch(net, x_sw, hid[::-1])
    assert np.array_equal(q_sw, q[::-1])
    assert np.array_equal(h_sw, h_new[::-1])


def test_hidden_state_causality():
    net = random_net(seed=3)
    rng = np.random.default_rng(12)
    obs_seq = rng.uniform(0, 1, (4, 3))
    future = obs_seq.copy()
    future[2:] = rng.uniform(0, 1, (2, 3))  # modified future observations

    def replay(seq, upto):
        hid = HiddenState(h=np.zeros(3))
        qs = []
        for t in range(upto):
            q, hid = agent_q(net, make_input(LAYOUT, seq[t], None, 0), hid)
            qs.append(q)
        return np.stack(qs)

    assert np.array_equal(replay(obs_seq, 2), replay(future, 2))


# --- select_action -----------------------------------------------------------


def test_greedy_selection():
    rng = np.random.default_rng(0)
    assert select_action(np.array([1.0, 5.0, 2.0]), np.ones(3, bool), 0.0, rng) == 1


def test_greedy_respects_mask():
    rng = np.random.default_rng(0)
    q = np.array([9.0, 5.0, 2.0])
    avail = np.array([False, True, True])
    assert select_action(q, avail, 0.0, rng) == 1


def test_uniform_frequencies():
    rng = np.random.default_rng(42)
    avail = np.array([True, True, False, True])
    counts = np.zeros(4)
    for _ in range(30000):
        counts[select_action(np.zeros(4), avail, 1.0, rng)] += 1
    freqs = counts / 30000
    assert freqs[2] == 0.0
    for i in (0, 1, 3):
        assert abs(freqs[i] - 1 / 3) < 0.02


def test_empty_mask_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(EnvContractError):
        select_action(np.zeros(2), np.zeros(2, bool), 0.5, rng)


def test_tie_break_lowest_index():
    rng = np.random.default_rng(0)
    assert select_action(np.zeros(4), np.ones(4, bool), 0.0, rng) == 0
    assert select_action(np.array([1.0, 1.0]), np.ones(2, bool), 0.0, rng) == 0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_greedy_invariant_to_constant_shift(seed):
    rng = np.random.default_rng(seed)
    q = rng.uniform(-10, 10, 5)
    avail = rng.random(5) < 0.7
    if not avail.any():
        avail[0] = True
    c = rng.uniform(-10, 10)
    pick = select_action(q, avail, 0.0, rng)
    assert select_action(q + c, avail, 0.0, rng) == pick


# --- parameter counting ------------------------------------------------------


@pytest.mark.parametrize("depth,size,recurrent", [(1, 1, True), (2, 3, True),
                                                  (3, 8, True), (2, 4, False)])
def test_agent_param_count_matches_enumeration(depth, size, recurrent):
    net = fresh_net(depth=depth, size=size, recurrent=recurrent)
    assert net.n_params == agent_param_count(LAYOUT, depth, size, recurrent)


def test_w_q_row_count_matches_ensemble():
    net = fresh_net(size=5)
    assert net.w_q.shape == (5, LAYOUT.n_actions)


def test_tree_views_share_memory():
    net = fresh_net()
    net.tree(1).theta_h[0] = 7.5
    assert net.cells.theta_h[1, 0] == 7.5
