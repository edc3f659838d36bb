import numpy as np
import pytest

from diffope.baselines import (
    DynamicsModel,
    QModel,
    ZeroBehaviorDensityError,
    dr_estimate,
    dr_per_trajectory,
    fqe_estimate,
    make_v_from_q,
    mb_estimate,
    pdis_estimate,
    pdis_per_trajectory,
    train_dynamics,
)
from diffope.data import Trajectory
from diffope.envs import (
    enumerate_paths,
    make_linear_toy,
    random_tabular_mdp,
    rollout_batch,
    tabular_dp_value,
    tabular_q_stationary,
    tabular_rollouts,
)
from diffope.policies import GaussianPolicy, TabularPolicy
from diffope.rng import RngStream


def tab_logp(policy_table):
    pol = TabularPolicy(policy_table)
    return lambda s, a: pol.log_prob(s[:, 0], a[:, 0])


def idx_traj(states_row, actions_row, rewards_row):
    t = len(actions_row)
    return Trajectory(np.asarray(states_row, dtype=float)[:, None],
                      np.asarray(actions_row, dtype=float)[:, None],
                      np.asarray(rewards_row, dtype=float),
                      np.zeros(t, dtype=bool))


def finite_horizon_q(mdp, policy_table):
    """Time-dependent DP tables Q[h] (h = steps remaining, 1..T) and V[h]."""
    t_max = mdp.horizon
    q = np.zeros((t_max + 1, mdp.n_states, mdp.n_actions))
    v = np.zeros((t_max + 1, mdp.n_states))
    for h in range(1, t_max + 1):
        q[h] = mdp.rewards + mdp.gamma * np.einsum("sat,t->sa", mdp.transitions,
                                                   v[h - 1])
        v[h] = (policy_table * q[h]).sum(axis=1)
    return q, v


# -- PDIS ------------------------------------------------------------------------


def test_pdis_on_policy_ratios_all_one():
    rng = RngStream(1)
    mdp = random_tabular_mdp(rng, 3, 2, horizon=4)
    table = rng.child(1).uniform((3, 2)) + 0.3
    table = table / table.sum(axis=1, keepdims=True)
    states, actions, rewards = tabular_rollouts(mdp, table, RngStream(2), n=200)
    trajs = [idx_traj(states[i], actions[i], rewards[i]) for i in range(200)]
    lp = tab_logp(table)
    est, _, clipped = pdis_estimate(trajs, lp, lp, mdp.gamma)
    disc = mdp.gamma ** np.arange(mdp.horizon)
    assert clipped == 0
    assert np.isclose(est, (rewards * disc).sum(axis=1).mean(), atol=1e-12)


def test_pdis_hand_example():
    # rewards (1, 1), gamma 0.5, rho_0 = 2, rho_1 = 0.5 -> 2 + 0.5*(2*0.5) = 2.5
    traj = idx_traj([0, 0, 0], [0, 1], [1.0, 1.0])
    lp_t = lambda s, a: np.where(a[:, 0] == 0, np.log(2.0), np.log(0.5))
    lp_b = lambda s, a: np.zeros(len(a))
    vals, _ = pdis_per_trajectory([traj], lp_t, lp_b, 0.5)
    assert np.isclose(vals[0], 2.5, atol=1e-12)


def test_pdis_unbiased_on_tabular():
    rng = RngStream(4)
    mdp = random_tabular_mdp(rng, 3, 2, horizon=4, gamma=0.9)
    beh = np.full((3, 2), 0.5)
    tgt = rng.child(5).uniform((3, 2)) + 0.25
    tgt = tgt / tgt.sum(axis=1, keepdims=True)
    n = 20000
    states, actions, rewards = tabular_rollouts(mdp, beh, RngStream(6), n=n)
    trajs = [idx_traj(states[i], actions[i], rewards[i]) for i in range(n)]
    est, se, _ = pdis_estimate(trajs, tab_logp(tgt), tab_logp(beh), mdp.gamma)
    truth = tabular_dp_value(mdp, tgt)
    assert abs(est - truth) <= 3 * se


def test_pdis_zero_behavior_density_reported():
    traj = idx_traj([0, 1, 0], [1, 0], [1.0, 1.0])
    beh = np.array([[1.0, 0.0], [0.5, 0.5]])  # action 1 impossible in state 0
    with pytest.raises(ZeroBehaviorDensityError, match="trajectory 0, step 0"):
        pdis_estimate([traj], tab_logp(beh), tab_logp(beh), 0.9)


def test_pdis_weight_clipping_reported():
    traj = idx_traj([0, 0, 0], [0, 0], [1.0, 1.0])
    lp_t = lambda s, a: np.full(len(a), np.log(1e5))
    lp_b = lambda s, a: np.zeros(len(a))
    vals, clipped = pdis_per_trajectory([traj], lp_t, lp_b, 1e-9)
    assert clipped == 1  # second cumulative weight 1e10 hits the 1e6 clip


# -- model-based -----------------------------------------------------------------


@pytest.fixture(scope="module")
def linear_dataset():
    env = make_linear_toy(horizon=16)
    behavior = GaussianPolicy.constant(1, 0.2, 0.3)
    rolls = rollout_batch(env, behavior, RngStream(100), n=200)
    return env, behavior, rolls.to_trajectories()


def test_mb_oracle_dynamics_matches_ground_truth(linear_dataset):
    env, behavior, trajs = linear_dataset
    from diffope.data import NormStats
    from diffope.nn import Mlp
    norm = NormStats.fit(trajs)
    # oracle-injected dynamics: exact linear map, exact noise scale
    net = Mlp.zeros([2, 1])
    oracle = DynamicsModel(net, norm, np.zeros(1), np.ones(1), np.array([0.2]))
    oracle.predict_next = lambda s, a, rng=None: (
        0.5 * s + 0.5 * a + (0.2 * rng.normal(s.shape) if rng is not None else 0.0))
    est, se, clipped = mb_estimate(oracle, behavior, env.reward_fn,
                                   env.init_sampler, env.horizon, env.gamma,
                                   n_rollouts=400, rng=RngStream(7))
    truth, t_se = 0.0, 0.0
    from diffope.envs import ground_truth_value
    truth, t_se = ground_truth_value(env, behavior, 4000, RngStream(8))
    assert clipped == 0
    assert abs(est - truth) <= 2 * np.hypot(se, t_se)


def test_mb_learned_dynamics_close(linear_dataset):
    env, behavior, trajs = linear_dataset
    dyn = train_dynamics(trajs, RngStream(9), hidden=(32, 32), steps=1500)
    est, se, _ = mb_estimate(dyn, behavior, env.reward_fn, env.init_sampler,
                             env.horizon, env.gamma, n_rollouts=400,
                             rng=RngStream(10))
    from diffope.envs import ground_truth_value
    truth, t_se = ground_truth_value(env, behavior, 4000, RngStream(11))
    assert abs(est - truth) <= 3 * np.hypot(se, t_se) + 0.05 * abs(truth)


def test_mb_zero_reward_head(linear_dataset):
    env, behavior, trajs = linear_dataset
    dyn = train_dynamics(trajs, RngStream(9), hidden=(16,), steps=200)
    est, _, _ = mb_estimate(dyn, behavior, lambda s, a: np.zeros(s.shape[0]),
                            env.init_sampler, env.horizon, env.gamma,
                            n_rollouts=50, rng=RngStream(12))
    assert est == 0.0


def test_mb_deterministic(linear_dataset):
    env, behavior, trajs = linear_dataset
    dyn = train_dynamics(trajs, RngStream(9), hidden=(16,), steps=200)
    args = (dyn, behavior, env.reward_fn, env.init_sampler, env.horizon,
            env.gamma, 50)
    a = mb_estimate(*args, rng=RngStream(13))
    b = mb_estimate(*args, rng=RngStream(13))
    assert a == b


def test_dynamics_termination_classifier():
    rng = RngStream(30)
    trajs = []
    for i in range(50):
        states = np.linspace(0, 4, 9)[:, None] + 0.01 * rng.child(i).normal((9, 1))
        dones = states[1:, 0] > 3.0
        trajs.append(Trajectory(states, np.zeros((8, 1)), np.zeros(8), dones))
    dyn = train_dynamics(trajs, RngStream(31), hidden=(16,), steps=800)
    assert dyn.term_net is not None
    p_low = dyn.predict_done_prob(np.array([[0.5]]))
    p_high = dyn.predict_done_prob(np.array([[3.9]]))
    assert p_low[0] < 0.2 and p_high[0] > 0.8


# -- FQE ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tabular_fqe_setup():
    rng = RngStream(3)
    s_n, a_n = 4, 2
    mdp = random_tabular_mdp(rng, s_n, a_n, horizon=6, gamma=0.7)
    beh = np.full((s_n, a_n), 0.5)
    tgt = rng.child(20).uniform((s_n, a_n)) + 0.3
    tgt = tgt / tgt.sum(axis=1, keepdims=True)
    states, actions, rewards = tabular_rollouts(mdp, beh, RngStream(5),
                                                n=40000, horizon=6)
    eye_s, eye_a = np.eye(s_n), np.eye(a_n)
    s = states[:, :-1].ravel()
    a = actions.ravel()
    transitions = (eye_s[s], eye_a[a], rewards.ravel(),
                   eye_s[states[:, 1:].ravel()],
                   np.zeros(s.size, dtype=bool))
    pol = TabularPolicy(tgt)

    def next_action(sn_onehot, rng):
        return eye_a[pol.sample(sn_onehot.argmax(axis=1), rng)]

    def initial_pairs(n, rng):
        cum = np.cumsum(mdp.init_dist)
        s0 = np.searchsorted(cum, rng.child(0).uniform(n),
                             side="right").clip(0, s_n - 1)
        return eye_s[s0], eye_a[pol.sample(s0, rng.child(1))]

    return mdp, tgt, transitions, next_action, initial_pairs, eye_s, eye_a


def test_fqe_matches_dp_q_on_tabular(tabular_fqe_setup):
    mdp, tgt, transitions, next_action, initial_pairs, eye_s, eye_a = tabular_fqe_setup
    qm = QModel.create(6, RngStream(7), hidden=(64,), polyak=0.05)
    est, qm, losses = fqe_estimate(transitions, next_action, initial_pairs, qm,
                                   mdp.gamma, RngStream(9), steps=5000,
                                   batch_size=512, lr=3e-3, n_initial=2048)
    q_exact = tabular_q_stationary(mdp, tgt)
    got = np.array([[qm.q_target(eye_s[None, si], eye_a[None, ai])[0]
                     for ai in range(2)] for si in range(4)])
    assert np.abs(got - q_exact).max() < 0.02
    j_exact = float((mdp.init_dist[:, None] * tgt * q_exact).sum())
    assert abs(est - j_exact) < 0.05


def test_fqe_bellman_residual_decreases(tabular_fqe_setup):
    mdp, tgt, transitions, next_action, initial_pairs, *_ = tabular_fqe_setup
    qm = QModel.create(6, RngStream(7), hidden=(64,), polyak=0.05)
    _, _, losses = fqe_estimate(transitions, next_action, initial_pairs, qm,
                                mdp.gamma, RngStream(9), steps=5000,
                                batch_size=512, lr=3e-3)
    buckets = losses.reshape(10, -1).mean(axis=1)
    for prev, nxt in zip(buckets[5:-1], buckets[6:]):
        assert nxt <= prev * 1.05


def test_fqe_gamma_zero_regresses_immediate_reward(tabular_fqe_setup):
    mdp, tgt, transitions, next_action, initial_pairs, eye_s, eye_a = tabular_fqe_setup
    qm = QModel.create(6, RngStream(8), hidden=(64,), polyak=0.05)
    est, qm, _ = fqe_estimate(transitions, next_action, initial_pairs, qm,
                              0.0, RngStream(10), steps=3000, batch_size=512,
                              lr=3e-3, n_initial=4096)
    # gamma = 0: the target policy's value is E[R(s0, a0)]
    j_exact = float((mdp.init_dist[:, None] * tgt * mdp.rewards).sum())
    assert abs(est - j_exact) < 0.02


def test_fqe_deterministic(tabular_fqe_setup):
    mdp, tgt, transitions, next_action, initial_pairs, *_ = tabular_fqe_setup
    runs = []
    for _ in range(2):
        qm = QModel.create(6, RngStream(7), hidden=(32,), polyak=0.05)
        est, _, _ = fqe_estimate(transitions, next_action, initial_pairs, qm,
                                 mdp.gamma, RngStream(9), steps=300,
                                 batch_size=256, lr=3e-3)
        runs.append(est)
    assert runs[0] == runs[1]


# -- doubly robust -----------------------------------------------------------------


@pytest.fixture(scope="module")
def dr_setup():
    rng = RngStream(40)
    mdp = random_tabular_mdp(rng, 3, 2, horizon=3, gamma=0.9)
    beh = np.full((3, 2), 0.5)
    tgt = rng.child(1).uniform((3, 2)) + 0.3
    tgt = tgt / tgt.sum(axis=1, keepdims=True)
    return mdp, beh, tgt


def enumerated_trajectories(mdp, policy_table):
    """All behavior paths as (Trajectory, probability) pairs."""
    out = []
    for path, prob in enumerate_paths(mdp, policy_table, mdp.horizon):
        states = [path[0]]
        actions, rewards = [], []
        for t in range(mdp.horizon):
            s, a = path[2 * t], path[2 * t + 1]
            actions.append(a)
            rewards.append(mdp.rewards[s, a])
            states.append(path[2 * t + 2])
        out.append((idx_traj(states, actions, rewards), prob))
    return out


def test_dr_exact_with_true_q_and_v(dr_setup):
    mdp, beh, tgt = dr_setup
    q_tab, v_tab = finite_horizon_q(mdp, tgt)
    t_max = mdp.horizon

    def q_fn(states, actions):
        s = states[:, 0].astype(int)
        a = actions[:, 0].astype(int)
        return np.array([q_tab[t_max - t][s[t], a[t]] for t in range(t_max)])

    def v_fn(states):
        s = states[:, 0].astype(int)
        return np.array([v_tab[t_max - t][s[t]] for t in range(t_max)])

    truth = tabular_dp_value(mdp, tgt)
    # exactness must hold for ANY importance ratios when Q and V are exact;
    # check the true ratio and a deliberately wrong one
    other = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
    for ratio_policy in (tgt, other):
        total = 0.0
        for traj, prob in enumerated_trajectories(mdp, beh):
            val = dr_per_trajectory([traj], tab_logp(ratio_policy),
                                    tab_logp(beh), mdp.gamma, q_fn, v_fn)[0]
            total += prob * val
        assert abs(total - truth) < 1e-12


def test_dr_reduces_to_pdis_with_zero_q_v(dr_setup):
    mdp, beh, tgt = dr_setup
    states, actions, rewards = tabular_rollouts(mdp, beh, RngStream(41), n=50)
    trajs = [idx_traj(states[i], actions[i], rewards[i]) for i in range(50)]
    zero = lambda *args: np.zeros(mdp.horizon)
    dr_vals = dr_per_trajectory(trajs, tab_logp(tgt), tab_logp(beh), mdp.gamma,
                                zero, zero)
    pdis_vals, _ = pdis_per_trajectory(trajs, tab_logp(tgt), tab_logp(beh),
                                       mdp.gamma)
    assert np.allclose(dr_vals, pdis_vals, atol=1e-12)


def test_dr_on_policy_unbiased(dr_setup):
    mdp, beh, tgt = dr_setup
    n = 20000
    states, actions, rewards = tabular_rollouts(mdp, beh, RngStream(42), n=n)
    trajs = [idx_traj(states[i], actions[i], rewards[i]) for i in range(n)]
    # arbitrary bounded Q-hat, V consistent with it under 8-sample MC
    q_fn = lambda s, a: 0.3 * s[:, 0] + 0.1 * a[:, 0]
    v_fn = lambda s: 0.3 * s[:, 0] + 0.05
    est, se = dr_estimate(trajs, tab_logp(beh), tab_logp(beh), mdp.gamma,
                          q_fn, v_fn)
    truth = tabular_dp_value(mdp, beh)
    assert abs(est - truth) <= 3 * se


def test_make_v_from_q_averages_policy_actions():
    pol = GaussianPolicy.constant(1, 0.5, 0.2)
    q_fn = lambda s, a: a[:, 0]
    v_fn = make_v_from_q(q_fn, pol, RngStream(50), n_samples=64)
    v = v_fn(np.zeros((5, 1)))
    assert np.allclose(v, 0.5, atol=0.15)
