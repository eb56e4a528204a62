import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import betaln

from setpool import agent as A
from setpool import env as E
from setpool import nncore as N
from setpool.agent import AgentParams, PolicyDistribution, Trajectory, Transition

from gradcheck import assert_grad_close, sampled_central_diff

D = 3  # embedding dim; states are 2 * D


def params_for(seed, gamma=0.999, jitter=0.05):
    rng = np.random.default_rng(seed)
    p = A.init_agent(D, rng, gamma)
    # nonzero biases keep relu units away from their kinks
    def j(net):
        return net.with_arrays([a + (jitter * rng.standard_normal(a.shape) if a.ndim == 1 else 0) for a in net.arrays()])
    return AgentParams(j(p.trunk), j(p.policy), j(p.value), gamma)


def zero_params():
    p = A.init_agent(D, np.random.default_rng(0))
    return AgentParams(N.zeros_like_net(p.trunk), N.zeros_like_net(p.policy), N.zeros_like_net(p.value), 0.999)


def test_architecture_dims():
    p = A.init_agent(128, np.random.default_rng(0))
    assert p.trunk.dims == [256, 100, 100]
    assert p.policy.dims == [100, 64, 16, 2]
    assert p.value.dims == [100, 64, 16, 1]
    assert p.trunk.activations == ["relu", "relu"]


def test_invalid_gamma_rejected():
    p = A.init_agent(D, np.random.default_rng(0))
    with pytest.raises(ValueError):
        AgentParams(p.trunk, p.policy, p.value, 1.0)


def test_zero_network_gives_symmetric_policy_and_zero_value():
    p = zero_params()
    dist = A.policy_forward(p, np.ones(2 * D))
    expected = 1 + np.log(2) + 1e-3
    assert dist.alpha == pytest.approx(expected, abs=1e-15) and dist.beta == pytest.approx(expected, abs=1e-15)
    assert dist.mean() == pytest.approx(0.5) and A.mode_action(dist) == pytest.approx(0.5)
    assert A.value_forward(p, np.ones(2 * D)) == 0.0


def test_policy_forward_matches_straight_line_oracle():
    p = params_for(1)
    s = np.random.default_rng(2).standard_normal(2 * D)

    def dense(net, x):
        for layer in net.layers:
            z = [sum(w * xi for w, xi in zip(row, x)) + b for row, b in zip(layer.weight.tolist(), layer.bias.tolist())]
            x = [max(v, 0.0) for v in z] if layer.activation == "relu" else z
        return x

    h = dense(p.trunk, s.tolist())
    o = dense(p.policy, h)
    v = dense(p.value, h)[0]
    dist = A.policy_forward(p, s)
    assert dist.alpha == pytest.approx(np.log1p(np.exp(o[0])) + 1.001, abs=1e-12)
    assert dist.beta == pytest.approx(np.log1p(np.exp(o[1])) + 1.001, abs=1e-12)
    assert A.value_forward(p, s) == pytest.approx(v, abs=1e-12)


def test_state_dim_mismatch_rejected():
    with pytest.raises(N.ShapeError):
        A.policy_forward(params_for(0), np.zeros(2 * D + 1))


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_shapes_exceed_one_and_modes_inside(seed):
    rng = np.random.default_rng(seed)
    p = params_for(seed % 7)
    s = 5 * rng.standard_normal((10, 2 * D))
    dist = A.policy_forward(p, s)
    assert np.all(dist.alpha > 1) and np.all(dist.beta > 1)
    m = dist.mode()
    assert np.all((m > 0) & (m < 1))


@pytest.mark.parametrize("ab", [(1.5, 1.5), (5.0, 2.0), (1.01, 7.0)])
def test_density_integrates_to_one(ab):
    dist = PolicyDistribution(*ab)
    x = (np.arange(10_000) + 0.5) / 10_000
    assert np.exp(dist.log_prob(x)).mean() == pytest.approx(1.0, abs=1e-3)


def test_beta_moment_and_histogram_oracles():
    rng = np.random.default_rng(0)
    dist = PolicyDistribution(5.0, 2.0)
    samples = [A.sample_action(dist, rng) for _ in range(10_000)]
    a = np.array([s[0] for s in samples])
    lp = np.array([s[1] for s in samples])
    assert np.all((a >= 0) & (a <= 1))
    assert abs(a.mean() - 5 / 7) < 0.02
    np.testing.assert_allclose(lp, 4 * np.log(a) + np.log1p(-a) - betaln(5, 2), atol=1e-12)
    hist, edges = np.histogram(a, bins=20, range=(0, 1), density=True)
    centers = (edges[:-1] + edges[1:]) / 2
    dens = np.exp(dist.log_prob(centers))
    # compare bin averages of the density rather than midpoint values
    fine = np.linspace(0, 1, 20 * 200 + 1)[1:-1]
    bin_avg = np.array([np.exp(dist.log_prob(fine[(fine >= lo) & (fine < hi)])).mean() for lo, hi in zip(edges[:-1], edges[1:])])
    assert np.max(np.abs(hist / 20 - bin_avg / 20)) < 0.05
    assert np.all(np.isfinite(dens))


def test_symmetric_mode():
    assert A.mode_action(PolicyDistribution(3.0, 3.0)) == 0.5


def test_td_error_examples():
    p = zero_params()
    p = AgentParams(p.trunk, p.policy, p.value.with_arrays(p.value.arrays()[:-1] + [np.array([0.3])]), 0.999)
    s = np.zeros(2 * D)
    assert A.td_error(p, Transition(s, 0.5, 0.0, 1.0, None, True)) == pytest.approx(0.7, abs=1e-15)
    # V(s') == V(s): delta = (gamma - 1) V
    assert A.td_error(p, Transition(s, 0.5, 0.0, 0.0, s, False)) == pytest.approx(-0.001 * 0.3, abs=1e-15)


def test_td_error_compositional():
    p = params_for(4, gamma=0.9)
    rng = np.random.default_rng(4)
    s, s2 = rng.standard_normal(2 * D), rng.standard_normal(2 * D)
    t = Transition(s, 0.3, 0.0, 0.25, s2, False)
    assert A.td_error(p, t) == pytest.approx(0.25 + 0.9 * A.value_forward(p, s2) - A.value_forward(p, s), abs=1e-14)
    traj = Trajectory.from_transitions([t, Transition(s2, 0.6, 0.0, -1.0, None, True)])
    np.testing.assert_allclose(A.td_errors(p, traj), [A.td_error(p, x) for x in traj.transitions()], atol=1e-14)


def random_trajectory(p, rng, T=None):
    T = T or int(rng.integers(1, 6))
    trans = []
    s = rng.standard_normal(2 * D)
    for t in range(T):
        a, lp = A.sample_action(A.policy_forward(p, s), rng)
        done = t == T - 1
        s2 = None if done else rng.standard_normal(2 * D)
        trans.append(Transition(s, a, lp, float(rng.standard_normal()), s2, done))
        s = s2
    return Trajectory.from_transitions(trans)


@pytest.mark.parametrize("seed", range(10))
def test_log_prob_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = params_for(seed)
    states = rng.standard_normal((3, 2 * D))
    actions = rng.uniform(0.05, 0.95, 3)
    w = rng.standard_normal(3)
    _, tg, pg = A.log_prob_and_grad(p, states, actions, w)
    trunk = [a.copy() for a in p.trunk.arrays()]
    pol = [a.copy() for a in p.policy.arrays()]

    def f():
        q = AgentParams(p.trunk.with_arrays(trunk), p.policy.with_arrays(pol), p.value, p.gamma)
        return float(w @ A.policy_forward(q, states).log_prob(actions))

    for arrays, grads in ((trunk, tg.arrays()), (pol, pg.arrays())):
        for a, g in zip(arrays, grads):
            idx, num = sampled_central_diff(f, a, rng)
            assert_grad_close(g.reshape(-1)[idx], num)


@pytest.mark.parametrize("seed", range(5))
def test_value_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = params_for(seed)
    states = rng.standard_normal((4, 2 * D))
    w = rng.standard_normal(4)
    _, tg, vg = A.value_and_grad(p, states, w)
    trunk = [a.copy() for a in p.trunk.arrays()]
    val = [a.copy() for a in p.value.arrays()]

    def f():
        q = AgentParams(p.trunk.with_arrays(trunk), p.policy, p.value.with_arrays(val), p.gamma)
        return float(w @ A.value_forward(q, states))

    for arrays, grads in ((trunk, tg.arrays()), (val, vg.arrays())):
        for a, g in zip(arrays, grads):
            idx, num = sampled_central_diff(f, a, rng)
            assert_grad_close(g.reshape(-1)[idx], num)


def test_single_step_policy_gradient_is_delta_times_score():
    rng = np.random.default_rng(3)
    p = params_for(3)
    traj = random_trajectory(p, rng, T=1)
    grads, _ = A.a2c_gradients(p, traj)
    delta = A.td_errors(p, traj)[0]
    _, tg, pg = A.log_prob_and_grad(p, traj.states, traj.actions, [1.0])
    np.testing.assert_allclose(grads.policy.flat(), delta * pg.flat(), atol=1e-12)
    np.testing.assert_allclose(grads.policy_trunk.flat(), delta * tg.flat(), atol=1e-12)


def test_zero_advantage_leaves_policy_unchanged():
    p = zero_params()  # V == 0 everywhere
    rng = np.random.default_rng(0)
    traj = random_trajectory(p, rng, T=4)
    traj.rewards[:] = 0.0
    new, diag = A.a2c_update(p, traj, 1e-2, 1e-2)
    assert diag["mean_abs_td"] == 0.0
    assert all(np.array_equal(a, b) for a, b in zip(p.policy_path(), new.policy_path()))


def test_stale_trajectory_raises():
    rng = np.random.default_rng(0)
    p = params_for(0)
    traj = random_trajectory(p, rng, T=3)
    traj.log_probs[1] += 1e-3
    with pytest.raises(A.OnPolicyViolation):
        A.a2c_gradients(p, traj)


def test_value_gradient_is_squared_td_gradient():
    rng = np.random.default_rng(8)
    p = params_for(8, gamma=0.9)
    traj = random_trajectory(p, rng, T=4)
    grads, _ = A.a2c_gradients(p, traj)
    targets = traj.rewards + 0.9 * np.where(traj.dones, 0.0, A.value_forward(p, traj.next_states))
    val = [a.copy() for a in p.value.arrays()]

    def f():
        q = AgentParams(p.trunk, p.policy, p.value.with_arrays(val), p.gamma)
        return float(np.sum((targets - A.value_forward(q, traj.states)) ** 2))

    for a, g in zip(val, grads.value.arrays()):
        idx, num = sampled_central_diff(f, a, rng)
        assert_grad_close(g.reshape(-1)[idx], num)


def test_score_function_has_zero_mean():
    rng = np.random.default_rng(0)
    p = params_for(2)
    s = rng.standard_normal(2 * D)
    dist = A.policy_forward(p, s)
    acts = np.array([A.sample_action(dist, rng)[0] for _ in range(10_000)])
    # per-sample scores, computed as one batch with one-hot weights would be slow; use the branch output instead
    states = np.tile(s, (len(acts), 1))
    h = N.forward(p.trunk, states)
    o = N.forward(p.policy, h)
    from scipy.special import digamma, expit
    al, be = dist.alpha, dist.beta
    d_al = (np.log(acts) - digamma(al) + digamma(al + be)) * expit(o[:, 0])
    d_be = (np.log1p(-acts) - digamma(be) + digamma(al + be)) * expit(o[:, 1])
    for g in (d_al, d_be):
        assert abs(g.mean()) < 3 * g.std() / np.sqrt(len(g))
    # the full parameter gradient of the mean score is small relative to a single sample's
    _, _, pg = A.log_prob_and_grad(p, states, acts, np.full(len(acts), 1.0 / len(acts)))
    _, _, pg1 = A.log_prob_and_grad(p, states[:1], acts[:1], [1.0])
    assert np.linalg.norm(pg.flat()) < 0.1 * np.linalg.norm(pg1.flat()) + 1e-3


def test_positive_advantage_increases_log_prob():
    rng = np.random.default_rng(0)
    p = params_for(5)
    s = rng.standard_normal(2 * D)
    a = 0.9
    lp = float(A.policy_forward(p, s).log_prob(a))
    traj = Trajectory.from_transitions([Transition(s, a, lp, 5.0, None, True)])
    assert A.td_errors(p, traj)[0] > 0
    new, _ = A.a2c_update(p, traj, 1e-4, 0.0)
    assert float(A.policy_forward(new, s).log_prob(a)) > lp


def test_shared_trunk_affects_both_heads():
    p = params_for(6)
    s = np.random.default_rng(6).standard_normal(2 * D)
    q = AgentParams(p.trunk.with_arrays([a * 1.1 for a in p.trunk.arrays()]), p.policy, p.value, p.gamma)
    assert A.policy_forward(q, s).alpha != A.policy_forward(p, s).alpha
    assert A.value_forward(q, s) != A.value_forward(p, s)


def test_learning_rate_draws_in_range():
    rng = np.random.default_rng(0)
    lrs = np.array([A.sample_learning_rate(rng) for _ in range(2000)])
    assert lrs.min() >= 1e-4 and lrs.max() <= 10 ** -3.3
    # log-uniform: the log-midpoint splits the draws evenly
    assert np.mean(np.log10(lrs) < -3.65) == pytest.approx(0.5, abs=0.05)


def test_rollout_modes():
    rng = np.random.default_rng(0)
    p = params_for(0)
    f = rng.standard_normal((5, D))
    head = E.make_reward_head(D, 2, rng)
    traj, st_ = A.rollout(p, f, 0, head, rng)
    assert len(traj) == 5 and traj.dones[-1] and not traj.dones[:-1].any()
    assert np.all((st_.weights >= 0) & (st_.weights <= 1))
    _, ones = A.rollout(p, f, 0, head, None, mode="ones")
    assert np.all(ones.weights == 1)
    _, binary = A.rollout(p, f, 0, head, None, mode="binary")
    assert set(np.unique(binary.weights)) <= {0.0, 1.0}
    _, m1 = A.rollout(p, f, 0, head, None, mode="mode")
    _, m2 = A.rollout(p, f, 0, head, None, mode="mode")
    np.testing.assert_array_equal(m1.weights, m2.weights)
    with pytest.raises(ValueError):
        A.rollout(p, f, 0, head, rng, mode="greedy")


def duplicate_toy(seed, episodes=2000, lr=3e-4, d=8):
    """Two identities, sets of three noisy items plus a noisier copy of the first."""
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((2, d))
    C /= np.linalg.norm(C, axis=1, keepdims=True)

    def make():
        y = int(rng.integers(2))
        sig = rng.uniform(1.0, 3.0, 3)
        f = C[y] + sig[:, None] * rng.standard_normal((3, d)) / np.sqrt(d)
        dup = C[y] + 2 * sig[0] * rng.standard_normal(d) / np.sqrt(d)
        return np.vstack([f, dup]), y

    head = E.make_reward_head(d, 2, rng, lam=0.1, hidden=16)
    data = [make() for _ in range(200)]
    X = np.vstack([f for f, _ in data])
    Y = np.repeat([y for _, y in data], 4)
    for _ in range(200):
        head = E.train_reward_head(head, X, Y, 0.5)
    p = A.init_agent(d, rng)
    opt = A.AgentOptimizer(p)
    dup_w, src_w = [], []
    for ep in range(episodes):
        f, y = make()
        traj, st_ = A.rollout(p, f, y, head, rng)
        g, _ = A.a2c_gradients(p, traj)
        p = opt.step(p, g, lr, lr)
        if ep >= episodes - 200:
            dup_w.append(st_.weights[3])
            src_w.append(st_.weights[0])
    return float(np.mean(dup_w)), float(np.mean(src_w))


def test_duplicate_gets_lower_weight_than_source():
    dup, src = duplicate_toy(0)
    assert dup < src
