"""Advantage actor-critic over per-item weights in [0, 1].

A shared trunk (two 100-unit relu layers) feeds a policy branch producing the
two shape parameters of a Beta distribution and a value branch producing a
scalar. The advantage is the one-step TD error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, digamma, expit

from . import env as envmod
from . import nncore
from .nncore import DenseNet, Gradients, ShapeError

SHAPE_OFFSET = 1.0 + 1e-3
TRUNK_DIMS = (100, 100)
BRANCH_DIMS = (64, 16)


class OnPolicyViolation(RuntimeError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class AgentParams:
    trunk: DenseNet
    policy: DenseNet
    value: DenseNet
    gamma: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.policy.input_dim != self.trunk.output_dim or self.value.input_dim != self.trunk.output_dim:
            raise ShapeError("branch inputs must equal the trunk output")
        if self.policy.output_dim != 2 or self.value.output_dim != 1:
            raise ShapeError("policy emits 2 shape parameters, value emits 1 scalar")

    @property
    def state_dim(self) -> int:
        return self.trunk.input_dim

    def copy(self) -> "AgentParams":
        return AgentParams(self.trunk.copy(), self.policy.copy(), self.value.copy(), self.gamma)

    def policy_path(self) -> list[np.ndarray]:
        return self.trunk.arrays() + self.policy.arrays()

    def with_policy_path(self, arrays) -> "AgentParams":
        n = len(self.trunk.arrays())
        return AgentParams(self.trunk.with_arrays(arrays[:n]), self.policy.with_arrays(arrays[n:]), self.value, self.gamma)

    def num_params(self) -> int:
        return self.trunk.num_params() + self.policy.num_params() + self.value.num_params()


def init_agent(embed_dim: int, rng: np.random.Generator, gamma: float = 0.999) -> AgentParams:
    trunk = nncore.init_dense([2 * embed_dim, *TRUNK_DIMS], ["relu", "relu"], rng)
    policy = nncore.init_dense([TRUNK_DIMS[-1], *BRANCH_DIMS, 2], ["relu", "relu", "identity"], rng)
    value = nncore.init_dense([TRUNK_DIMS[-1], *BRANCH_DIMS, 1], ["relu", "relu", "identity"], rng)
    return AgentParams(trunk, policy, value, gamma)


@dataclass
class PolicyDistribution:
    alpha: np.ndarray | float
    beta: np.ndarray | float

    def log_prob(self, a):
        a = np.asarray(a, dtype=np.float64)
        return (self.alpha - 1) * np.log(a) + (self.beta - 1) * np.log1p(-a) - betaln(self.alpha, self.beta)

    def mean(self):
        return self.alpha / (self.alpha + self.beta)

    def mode(self):
        return (self.alpha - 1.0) / (self.alpha + self.beta - 2.0)

    def entropy(self):
        a, b = self.alpha, self.beta
        return betaln(a, b) - (a - 1) * digamma(a) - (b - 1) * digamma(b) + (a + b - 2) * digamma(a + b)


ACTION_EPS = 1e-6


def sample_action(dist: PolicyDistribution, rng: np.random.Generator) -> tuple[float, float]:
    a = float(np.clip(rng.beta(dist.alpha, dist.beta), ACTION_EPS, 1.0 - ACTION_EPS))
    return a, float(dist.log_prob(a))


def mode_action(dist: PolicyDistribution) -> float:
    return float(dist.mode())


def _trunk(params: AgentParams, states):
    return nncore.forward_cache(params.trunk, states)


def policy_forward(params: AgentParams, state) -> PolicyDistribution:
    h = nncore.forward(params.trunk, state)
    o = nncore.forward(params.policy, h)
    shapes = softplus(o) + SHAPE_OFFSET
    return PolicyDistribution(shapes[..., 0], shapes[..., 1])


def value_forward(params: AgentParams, state):
    h = nncore.forward(params.trunk, state)
    v = nncore.forward(params.value, h)
    return v[..., 0] if v.ndim > 1 else float(v[0])


@dataclass
class Transition:
    state: np.ndarray
    action: float
    log_prob: float  # behaviour policy log-density of the action
    reward: float
    next_state: np.ndarray | None
    done: bool


@dataclass
class Trajectory:
    """One episode as aligned arrays; terminal rows of ``next_states`` are zero."""

    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_transitions(cls, transitions: list[Transition]) -> "Trajectory":
        d = len(transitions[0].state)
        return cls(
            np.array([t.state for t in transitions]),
            np.array([t.action for t in transitions], dtype=np.float64),
            np.array([t.log_prob for t in transitions], dtype=np.float64),
            np.array([t.reward for t in transitions], dtype=np.float64),
            np.array([t.next_state if t.next_state is not None else np.zeros(d) for t in transitions]),
            np.array([t.done for t in transitions], dtype=bool),
        )

    def transitions(self) -> list[Transition]:
        return [
            Transition(self.states[i], float(self.actions[i]), float(self.log_probs[i]), float(self.rewards[i]),
                       None if self.dones[i] else self.next_states[i], bool(self.dones[i]))
            for i in range(len(self))
        ]


def td_error(params: AgentParams, transition: Transition) -> float:
    v = value_forward(params, transition.state)
    v_next = 0.0 if transition.done else value_forward(params, transition.next_state)
    return transition.reward + params.gamma * v_next - v


def td_errors(params: AgentParams, traj: Trajectory) -> np.ndarray:
    v = value_forward(params, traj.states)
    v_next = np.where(traj.dones, 0.0, value_forward(params, traj.next_states))
    return traj.rewards + params.gamma * v_next - v


def log_prob_and_grad(params: AgentParams, states, actions, weights) -> tuple[np.ndarray, Gradients, Gradients]:
    """Log-densities and the gradient of ``sum_t w_t log pi(a_t|s_t)``.

    Returns (log_probs, trunk gradient, policy-branch gradient).
    """
    states = np.atleast_2d(states)
    actions = np.atleast_1d(np.asarray(actions, dtype=np.float64))
    w = np.atleast_1d(np.asarray(weights, dtype=np.float64))
    h, tcache = _trunk(params, states)
    o, pcache = nncore.forward_cache(params.policy, h)
    al = softplus(o[:, 0]) + SHAPE_OFFSET
    be = softplus(o[:, 1]) + SHAPE_OFFSET
    psi_ab = digamma(al + be)
    logp = (al - 1) * np.log(actions) + (be - 1) * np.log1p(-actions) - betaln(al, be)
    d_al = np.log(actions) - digamma(al) + psi_ab
    d_be = np.log1p(-actions) - digamma(be) + psi_ab
    up = np.stack([w * d_al * expit(o[:, 0]), w * d_be * expit(o[:, 1])], axis=1)
    pg = nncore.backward_cache(params.policy, pcache, up)
    tg = nncore.backward_cache(params.trunk, tcache, pg.input)
    return logp, tg, pg


def value_and_grad(params: AgentParams, states, weights) -> tuple[np.ndarray, Gradients, Gradients]:
    """Values and the gradient of ``sum_t w_t V(s_t)``: (values, trunk grad, value-branch grad)."""
    states = np.atleast_2d(states)
    w = np.atleast_1d(np.asarray(weights, dtype=np.float64))
    h, tcache = _trunk(params, states)
    v, vcache = nncore.forward_cache(params.value, h)
    vg = nncore.backward_cache(params.value, vcache, w[:, None])
    tg = nncore.backward_cache(params.trunk, tcache, vg.input)
    return v[:, 0], tg, vg


@dataclass
class AgentGrads:
    policy_trunk: Gradients
    policy: Gradients
    value_trunk: Gradients
    value: Gradients


def a2c_gradients(params: AgentParams, traj: Trajectory, check_on_policy: bool = True) -> tuple[AgentGrads, dict]:
    """Ascent direction for the policy and descent gradient for the squared TD error."""
    delta = td_errors(params, traj)
    logp, ptg, pg = log_prob_and_grad(params, traj.states, traj.actions, delta)
    if check_on_policy and np.any(np.abs(logp - traj.log_probs) > 1e-6):
        raise OnPolicyViolation("trajectory log-probabilities do not match the current policy")
    # d/dw sum delta^2 with the bootstrap target held fixed = -2 sum delta grad V
    _, vtg, vg = value_and_grad(params, traj.states, -2.0 * delta)
    dist = policy_forward(params, traj.states)
    diag = {"mean_abs_td": float(np.abs(delta).mean()), "mean_entropy": float(np.mean(dist.entropy()))}
    return AgentGrads(ptg, pg, vtg, vg), diag


def apply_agent_step(params: AgentParams, grads: AgentGrads, lr_policy: float, lr_value: float) -> AgentParams:
    trunk = params.trunk.with_arrays([
        a + lr_policy * gp - lr_value * gv
        for a, gp, gv in zip(params.trunk.arrays(), grads.policy_trunk.arrays(), grads.value_trunk.arrays())
    ])
    return AgentParams(
        trunk,
        nncore.apply_step(params.policy, grads.policy, lr_policy),
        nncore.apply_step(params.value, grads.value, -lr_value),
        params.gamma,
    )


def a2c_update(params: AgentParams, traj: Trajectory, lr_policy: float, lr_value: float) -> tuple[AgentParams, dict]:
    grads, diag = a2c_gradients(params, traj)
    return apply_agent_step(params, grads, lr_policy, lr_value), diag


class AgentOptimizer:
    """Adam on the agent, with the policy ascending and the value descending."""

    def __init__(self, params: AgentParams):
        self.trunk = nncore.Adam([a.shape for a in params.trunk.arrays()])
        self.policy = nncore.Adam([a.shape for a in params.policy.arrays()])
        self.value = nncore.Adam([a.shape for a in params.value.arrays()])

    def step(self, params: AgentParams, grads: AgentGrads, lr_policy: float, lr_value: float) -> AgentParams:
        # lr ratio folds the value step into the shared trunk direction
        ratio = lr_value / lr_policy if lr_policy > 0 else 0.0
        trunk_dir = [gp - ratio * gv for gp, gv in zip(grads.policy_trunk.arrays(), grads.value_trunk.arrays())]
        trunk = params.trunk.with_arrays(self.trunk.step(params.trunk.arrays(), trunk_dir, lr_policy, ascend=True))
        policy = params.policy.with_arrays(self.policy.step(params.policy.arrays(), grads.policy.arrays(), lr_policy, ascend=True))
        value = params.value.with_arrays(self.value.step(params.value.arrays(), grads.value.arrays(), lr_value))
        return AgentParams(trunk, policy, value, params.gamma)

    def state_arrays(self) -> list[np.ndarray]:
        return self.trunk.state_arrays() + self.policy.state_arrays() + self.value.state_arrays()

    def load_state_arrays(self, arrays) -> None:
        i = 0
        for opt in (self.trunk, self.policy, self.value):
            n = 2 * len(opt.m) + 1
            opt.load_state_arrays(arrays[i:i + n])
            i += n


def sample_learning_rate(rng: np.random.Generator, lo: float = 1e-4, hi: float = 10 ** -3.3) -> float:
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


ACTION_MODES = ("sample", "mode", "binary", "ones")


def rollout(params: AgentParams, features, label: int, head: envmod.RewardHead, rng: np.random.Generator | None,
            mode: str = "sample", order=None, threshold: float | None = None) -> tuple[Trajectory, envmod.EpisodeState]:
    """Run one episode. ``mode`` picks sampled, modal, modal-rounded-to-{0,1} or all-ones actions."""
    if mode not in ACTION_MODES:
        raise ValueError(f"unknown action mode {mode!r}")
    state = envmod.new_episode(features, order=order, rng=rng if (order is None and mode == "sample") else None)
    s = envmod.build_state(state)
    loss = None
    transitions = []
    while not state.done:
        dist = policy_forward(params, s)
        if mode == "sample":
            a, logp = sample_action(dist, rng)
        else:
            a = 1.0 if mode == "ones" else mode_action(dist)
            if mode == "binary":
                a = float(a >= 0.5)
            logp = float(dist.log_prob(np.clip(a, ACTION_EPS, 1 - ACTION_EPS)))
        out = envmod.step(state, a, head, label, threshold=threshold, loss_before=loss)
        loss = out.loss_after
        transitions.append(Transition(s, a, logp, out.reward, out.next_state, out.done))
        s = out.next_state
    return Trajectory.from_transitions(transitions), state
