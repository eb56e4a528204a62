import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from setpool import agent as A
from setpool import nncore as N
from setpool import offpolicy as O
from setpool.agent import AgentParams, Trajectory, Transition
from setpool.nncore import ShapeError
from setpool.offpolicy import AveragePolicy, ReplayPool, TrustRegionConfig

from gradcheck import assert_grad_close
from oracles import (
    a2c_policy_gradient, discounted_returns, jittered_agent, mc_value_gradient, quadrature_beta_kl,
    random_feasible_check, random_trajectory,
)

D = 3


# --- importance ratios and returns ---------------------------------------------

def test_is_ratio_examples():
    assert O.is_ratio(-0.4, -0.4, 5) == 1.0
    assert O.is_ratio(np.log(100.0), 0.0, 5) == 5.0
    assert O.is_ratio(-0.5, -1.2, 5) == pytest.approx(2.01375270747, abs=1e-10)


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.1, 10))
def test_is_ratio_never_exceeds_c(lp, lq, c):
    r = O.is_ratio(lp, lq, c)
    assert 0 <= r <= c


def test_off_policy_return_hand_example():
    assert O.off_policy_return([1, 1, 1], [7.0, 2.0, 0.5], 0.9, 0) == pytest.approx(3.61, abs=1e-12)


def test_last_step_return_ignores_ratios():
    assert O.off_policy_return([0.3, -2.0], [4.0, 4.0], 0.9, 1) == -2.0


def test_misaligned_return_inputs_rejected():
    with pytest.raises(ShapeError):
        O.off_policy_return([1, 2], [1], 0.9, 0)
    with pytest.raises(ShapeError):
        O.off_policy_returns([1, 2], [1], 0.9)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=15), st.floats(0, 0.999))
def test_unit_ratios_give_discounted_return(rewards, gamma):
    ones = np.ones(len(rewards))
    ref = discounted_returns(rewards, gamma)
    got = O.off_policy_returns(rewards, ones, gamma)
    np.testing.assert_allclose(got, ref, atol=1e-12)
    assert O.off_policy_return(rewards, ones, gamma, 0) == pytest.approx(ref[0], abs=1e-12)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0, 5)), min_size=1, max_size=12), st.floats(0, 0.999))
def test_recursive_returns_match_nested_sum(rows, gamma):
    r, rho = map(np.array, zip(*rows))
    rec = O.off_policy_returns(r, rho, gamma)
    for t in range(len(r)):
        assert rec[t] == pytest.approx(O.off_policy_return(r, rho, gamma, t), abs=1e-9)


# --- gradients -----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_unit_ratios_reduce_to_on_policy_gradients(seed):
    rng = np.random.default_rng(seed)
    p = jittered_agent(D, seed, gamma=0.9)
    traj = random_trajectory(p, rng)
    ones = np.ones(len(traj))
    vt, vv = O.off_value_gradient(p, traj, ratios=ones)
    rt, rv = mc_value_gradient(p, traj)
    np.testing.assert_allclose(N.flatten(vt.arrays() + vv.arrays()), N.flatten(rt + rv), atol=1e-10)
    pt, pp = O.off_policy_gradient(p, traj, ratios=ones)
    qt, qp = a2c_policy_gradient(p, traj)
    np.testing.assert_allclose(N.flatten(pt.arrays() + pp.arrays()), N.flatten(qt + qp), atol=1e-10)
    # the same trajectory scored by its own generating policy has every ratio equal to one
    rho, _ = O.trajectory_ratios(p, traj, 5.0)
    np.testing.assert_allclose(rho, 1.0, atol=1e-12)


def test_policy_gradient_scales_linearly_with_ratio():
    rng = np.random.default_rng(2)
    p = jittered_agent(D, 2)
    traj = random_trajectory(p, rng, length=1)
    t1, p1 = O.off_policy_gradient(p, traj, ratios=[1.0])
    t2, p2 = O.off_policy_gradient(p, traj, ratios=[2.0])
    np.testing.assert_allclose(p2.flat(), 2 * p1.flat(), atol=1e-14)
    np.testing.assert_allclose(t2.flat(), 2 * t1.flat(), atol=1e-14)


def _constant_value_agent(c=0.0):
    p = A.init_agent(D, np.random.default_rng(0))
    value = N.zeros_like_net(p.value)
    value = value.with_arrays(value.arrays()[:-1] + [np.array([c])])
    return AgentParams(p.trunk, p.policy, value, 0.5)


def test_zero_td_error_gives_zero_policy_gradient():
    p = _constant_value_agent(0.0)
    rng = np.random.default_rng(0)
    traj = random_trajectory(p, rng, length=3)
    traj.rewards[:] = 0.0
    t, g = O.off_policy_gradient(p, traj, ratios=np.full(3, 3.0))
    assert np.all(t.flat() == 0) and np.all(g.flat() == 0)


def test_zero_residual_gives_zero_value_gradient():
    # V == 1 everywhere; rewards chosen so every return equals 1
    p = _constant_value_agent(1.0)
    rng = np.random.default_rng(1)
    traj = random_trajectory(p, rng, length=3)
    rho = np.array([1.0, 2.0, 0.25])
    traj.rewards[:] = [1 - 0.5 * 2.0 * 1.0, 1 - 0.5 * 0.25 * 1.0, 1.0]
    np.testing.assert_allclose(O.off_policy_returns(traj.rewards, rho, 0.5), 1.0, atol=1e-15)
    t, v = O.off_value_gradient(p, traj, ratios=rho)
    assert np.all(t.flat() == 0) and np.all(v.flat() == 0)


def test_two_step_value_gradient_hand_expansion():
    # with a zero network everywhere but the output bias b, V = b and dV/db = 1
    p = _constant_value_agent(0.2)
    rng = np.random.default_rng(3)
    traj = random_trajectory(p, rng, length=2)
    traj.rewards[:] = [1.0, 2.0]
    rho = np.array([3.0, 0.5])
    _, v = O.off_value_gradient(p, traj, ratios=rho)
    R0 = 1.0 + 0.5 * 0.5 * 2.0
    R1 = 2.0
    expected = (R0 - 0.2) * 3.0 + (R1 - 0.2) * 3.0 * 0.5
    assert v.arrays()[-1][0] == pytest.approx(expected, abs=1e-12)
    assert np.all(N.flatten(v.arrays()[:-1]) == 0)


@pytest.mark.parametrize("seed", range(10))
def test_used_ratios_are_truncated_at_c(seed):
    rng = np.random.default_rng(seed)
    p = jittered_agent(D, seed)
    traj = random_trajectory(p, rng, length=5)
    traj.log_probs[:] -= rng.uniform(0, 6, 5)  # behaviour much less likely than the current policy
    rho, raw = O.trajectory_ratios(p, traj, 5.0)
    assert np.all(rho <= 5.0) and np.any(raw > 5.0)
    np.testing.assert_array_equal(rho, np.minimum(raw, 5.0))


# --- KL and trust region ---------------------------------------------------------

def test_beta_kl_examples():
    assert O.beta_kl(2.0, 2.0, 2.0, 2.0) == pytest.approx(0.0, abs=1e-15)
    assert O.beta_kl(2.0, 2.0, 3.0, 2.0) > 0


@pytest.mark.parametrize("shapes", [(2, 2, 3, 2), (1.5, 4.0, 2.2, 1.1), (6.0, 1.2, 1.01, 1.01)])
def test_beta_kl_matches_quadrature(shapes):
    assert O.beta_kl(*shapes) == pytest.approx(quadrature_beta_kl(*shapes), abs=1e-4)


def test_kl_gradient_vanishes_at_the_average():
    p = jittered_agent(D, 0)
    s = np.random.default_rng(0).standard_normal((4, 2 * D))
    kl, k = O.kl_and_gradient(p, AveragePolicy.from_agent(p), s)
    np.testing.assert_allclose(kl, 0.0, atol=1e-12)
    assert np.max(np.abs(k)) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_kl_gradient_matches_quadrature_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = jittered_agent(D, seed)
    avg = AveragePolicy.from_agent(jittered_agent(D, seed + 100))
    s = rng.standard_normal((2, 2 * D))
    _, k = O.kl_and_gradient(p, avg, s)
    a1, b1 = avg.shapes(s)
    flat = N.flatten(p.policy_path())
    nt = len(p.trunk.arrays())

    def f(x):
        arrs = N.unflatten(x, p.policy_path())
        q = AgentParams(p.trunk.with_arrays(arrs[:nt]), p.policy.with_arrays(arrs[nt:]), p.value, p.gamma)
        d = A.policy_forward(q, s)
        return np.mean([quadrature_beta_kl(a1[i], b1[i], d.alpha[i], d.beta[i]) for i in range(len(s))])

    idx = rng.choice(len(flat), size=12, replace=False)
    eps = 1e-4
    for i in idx:
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        num = (f(xp) - f(xm)) / (2 * eps)
        assert abs(k[i] - num) <= 1e-3 * max(abs(num), abs(k[i])) + 1e-7


def test_projection_hand_example():
    z = O.trust_region_project([2.0, 0.0], [1.0, 0.0], 1.0)
    np.testing.assert_allclose(z, [1.0, 0.0])
    assert z @ np.array([1.0, 0.0]) == pytest.approx(1.0)


def test_projection_inactive_and_zero_k():
    g = np.array([0.5, -1.0])
    np.testing.assert_array_equal(O.trust_region_project(g, [1.0, 1.0], 1.0), g)
    np.testing.assert_array_equal(O.trust_region_project(g, [0.0, 0.0], 1.0), g)
    with pytest.raises(ShapeError):
        O.trust_region_project(g, [1.0], 1.0)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_projection_is_feasible_idempotent_and_closest(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    g, k = 3 * rng.standard_normal(n), rng.standard_normal(n)
    xi = float(rng.uniform(0.01, 3.0))
    z = O.trust_region_project(g, k, xi)
    assert k @ z <= xi + 1e-9
    if k @ g <= xi:
        np.testing.assert_array_equal(z, g)
    np.testing.assert_allclose(O.trust_region_project(z, k, xi), z, atol=1e-12)
    assert random_feasible_check(g, k, xi, z, rng)


# --- average policy, pool and replay step ---------------------------------------

def test_soft_update_examples():
    p = jittered_agent(D, 0)
    avg = AveragePolicy(p.trunk.with_arrays([np.ones_like(a) for a in p.trunk.arrays()]),
                        p.policy.with_arrays([np.ones_like(a) for a in p.policy.arrays()]))
    zero = AgentParams(p.trunk.with_arrays([np.zeros_like(a) for a in p.trunk.arrays()]),
                       p.policy.with_arrays([np.zeros_like(a) for a in p.policy.arrays()]), p.value, p.gamma)
    assert all(np.all(a == 1) for a in O.soft_update_average(avg, zero, 1.0).arrays())
    assert all(np.all(a == 0) for a in O.soft_update_average(avg, zero, 0.0).arrays())
    assert all(np.allclose(a, 0.995) for a in O.soft_update_average(avg, zero, 0.995).arrays())


def test_soft_update_rejects_shape_mismatch():
    p = jittered_agent(D, 0)
    other = A.init_agent(D + 1, np.random.default_rng(0))
    with pytest.raises((ShapeError, ValueError)):
        O.soft_update_average(AveragePolicy.from_agent(p), other, 0.5)


def test_trust_region_config_validation():
    with pytest.raises(ValueError):
        TrustRegionConfig(xi=0)
    with pytest.raises(ValueError):
        TrustRegionConfig(alpha=1.5)
    with pytest.raises(ValueError):
        TrustRegionConfig(capacity=0)


def test_pool_evicts_oldest_first():
    pool = ReplayPool(3)
    trajs = [Trajectory.from_transitions([Transition(np.zeros(2), 0.5, float(-i), 0.0, None, True)]) for i in range(5)]
    for t in trajs:
        pool.add(t)
        assert len(pool) <= 3
    assert [float(t.log_probs[0]) for t in pool.items()] == [-2.0, -3.0, -4.0]
    sample = pool.sample(50, np.random.default_rng(0))
    assert {float(t.log_probs[0]) for t in sample} <= {-2.0, -3.0, -4.0}
    with pytest.raises(ValueError):
        ReplayPool(0)


def test_empty_pool_is_a_noop():
    p = jittered_agent(D, 0)
    avg = AveragePolicy.from_agent(p)
    new, avg2, diag = O.replay_train_step(p, avg, ReplayPool(4), TrustRegionConfig(), 1e-3, 1e-3,
                                          np.random.default_rng(0))
    assert new is p and avg2 is avg and diag["skipped"]


def test_fresh_pool_step_equals_on_policy_step():
    rng = np.random.default_rng(5)
    p = jittered_agent(D, 5, gamma=0.9)
    traj = random_trajectory(p, rng, length=4)
    pool = ReplayPool(1)
    pool.add(traj)
    cfg = TrustRegionConfig(xi=1e6, batch_size=1)
    grads, diag = O.replay_gradients(p, AveragePolicy.from_agent(p), [traj], cfg)
    assert not diag["projection_active"] and diag["truncation_rate"] == 0
    qt, qp = a2c_policy_gradient(p, traj)
    np.testing.assert_allclose(N.flatten(grads.policy_trunk.arrays() + grads.policy.arrays()), N.flatten(qt + qp),
                               atol=1e-10)
    rt, rv = mc_value_gradient(p, traj)
    np.testing.assert_allclose(N.flatten(grads.value_trunk.arrays() + grads.value.arrays()), -N.flatten(rt + rv),
                               atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_kl_drift_stays_within_loose_bound(seed):
    rng = np.random.default_rng(seed)
    p = jittered_agent(D, seed)
    avg = AveragePolicy.from_agent(p)
    pool = ReplayPool(20)
    for _ in range(10):
        pool.add(random_trajectory(p, rng, length=4))
    cfg = TrustRegionConfig(xi=1.0, batch_size=4)
    probes = rng.standard_normal((32, 2 * D))
    lr = 1e-3
    for _ in range(10):
        before = float(np.mean(O.kl_and_gradient(p, avg, probes)[0]))
        p, avg, diag = O.replay_train_step(p, avg, pool, cfg, lr, lr, rng)
        after = float(np.mean(O.kl_and_gradient(p, avg, probes)[0]))
        assert after <= before + cfg.xi * lr * 10
        assert 0 <= diag["truncation_rate"] <= 1 and diag["mean_kl"] >= 0
