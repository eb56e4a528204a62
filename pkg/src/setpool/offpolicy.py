"""Experience replay for the set-weighting agent.

Stored trajectories are reweighted by truncated importance ratios between the
current policy and the policy that generated them. The policy step is projected
onto a linearised KL trust region around a slowly moving average policy.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, digamma, expit

from . import nncore
from .agent import (
    SHAPE_OFFSET,
    AgentGrads,
    AgentParams,
    Trajectory,
    apply_agent_step,
    log_prob_and_grad,
    softplus,
    value_and_grad,
    value_forward,
)
from .nncore import DenseNet, Gradients, ShapeError


@dataclass
class TrustRegionConfig:
    xi: float = 1.0
    alpha: float = 0.995
    c: float = 5.0
    capacity: int = 5000
    batch_size: int = 16

    def __post_init__(self):
        if not (self.xi > 0 and self.c > 0 and 0 < self.alpha <= 1):
            raise ValueError("need xi > 0, c > 0 and alpha in (0, 1]")
        if self.capacity < 1 or self.batch_size < 1:
            raise ValueError("capacity and batch_size must be positive")


class ReplayPool:
    """Fixed-capacity FIFO of trajectories, sampled uniformly with replacement."""

    def __init__(self, capacity: int = 5000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[Trajectory] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def add(self, traj: Trajectory) -> None:
        self._items.append(traj)

    def __getitem__(self, i: int) -> Trajectory:
        return self._items[i]

    def sample(self, n: int, rng: np.random.Generator) -> list[Trajectory]:
        idx = rng.integers(len(self._items), size=n)
        return [self._items[i] for i in idx]

    def items(self) -> list[Trajectory]:
        return list(self._items)


@dataclass
class AveragePolicy:
    trunk: DenseNet
    policy: DenseNet

    @classmethod
    def from_agent(cls, params: AgentParams) -> "AveragePolicy":
        return cls(params.trunk.copy(), params.policy.copy())

    def arrays(self) -> list[np.ndarray]:
        return self.trunk.arrays() + self.policy.arrays()

    def with_arrays(self, arrays) -> "AveragePolicy":
        n = len(self.trunk.arrays())
        return AveragePolicy(self.trunk.with_arrays(arrays[:n]), self.policy.with_arrays(arrays[n:]))

    def shapes(self, states) -> tuple[np.ndarray, np.ndarray]:
        o = nncore.forward(self.policy, nncore.forward(self.trunk, np.atleast_2d(states)))
        return softplus(o[:, 0]) + SHAPE_OFFSET, softplus(o[:, 1]) + SHAPE_OFFSET


def is_ratio(current_log_prob, behavior_log_prob, c: float):
    """Truncated importance ratio ``min(pi/mu, c)``."""
    return np.minimum(np.exp(np.asarray(current_log_prob) - np.asarray(behavior_log_prob)), c)


def off_policy_return(rewards, ratios, gamma: float, t: int) -> float:
    """Off-policy Monte-Carlo return from step ``t`` (0-based).

    ``r_t + sum_{j>=1} gamma^j r_{t+j} prod_{i=1..j} rho_{t+i}``; ``ratios[t]``
    itself never enters.
    """
    r = np.asarray(rewards, dtype=np.float64)
    rho = np.asarray(ratios, dtype=np.float64)
    if r.shape != rho.shape or r.ndim != 1:
        raise ShapeError("rewards and ratios must be aligned 1-D sequences")
    if not 0 <= t < len(r):
        raise ShapeError("t outside the trajectory")
    total = r[t]
    prod = 1.0
    for j in range(1, len(r) - t):
        prod *= rho[t + j]
        total += gamma ** j * r[t + j] * prod
    return float(total)


def off_policy_returns(rewards, ratios, gamma: float) -> np.ndarray:
    """All off-policy returns at once via ``R_t = r_t + gamma rho_{t+1} R_{t+1}``."""
    r = np.asarray(rewards, dtype=np.float64)
    rho = np.asarray(ratios, dtype=np.float64)
    if r.shape != rho.shape:
        raise ShapeError("rewards and ratios must be aligned")
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + (gamma * rho[t + 1] * acc if t + 1 < len(r) else 0.0)
        out[t] = acc
    return out


def trajectory_ratios(params: AgentParams, traj: Trajectory, c: float) -> tuple[np.ndarray, np.ndarray]:
    """(truncated ratios, raw ratios) of the current policy against the stored behaviour."""
    logp, _, _ = log_prob_and_grad(params, traj.states, traj.actions, np.zeros(len(traj)))
    raw = np.exp(logp - traj.log_probs)
    return np.minimum(raw, c), raw


def off_value_gradient(params: AgentParams, traj: Trajectory, c: float = 5.0,
                       ratios: np.ndarray | None = None) -> tuple[Gradients, Gradients]:
    """``sum_t (R_t - V(s_t)) grad V(s_t) prod_{i<=t} rho_i`` as (trunk, value-branch) gradients."""
    rho = trajectory_ratios(params, traj, c)[0] if ratios is None else np.asarray(ratios, dtype=np.float64)
    ret = off_policy_returns(traj.rewards, rho, params.gamma)
    v = value_forward(params, traj.states)
    w = (ret - v) * np.cumprod(rho)
    _, tg, vg = value_and_grad(params, traj.states, w)
    return tg, vg


def off_policy_gradient(params: AgentParams, traj: Trajectory, c: float = 5.0,
                        ratios: np.ndarray | None = None) -> tuple[Gradients, Gradients]:
    """``sum_t rho_t delta_t grad log pi(a_t|s_t)`` as (trunk, policy-branch) gradients."""
    rho = trajectory_ratios(params, traj, c)[0] if ratios is None else np.asarray(ratios, dtype=np.float64)
    v = value_forward(params, traj.states)
    v_next = np.where(traj.dones, 0.0, value_forward(params, traj.next_states))
    delta = traj.rewards + params.gamma * v_next - v
    _, tg, pg = log_prob_and_grad(params, traj.states, traj.actions, rho * delta)
    return tg, pg


def beta_kl(a1, b1, a2, b2):
    """KL(Beta(a1, b1) || Beta(a2, b2))."""
    return (betaln(a2, b2) - betaln(a1, b1) + (a1 - a2) * digamma(a1) + (b1 - b2) * digamma(b1)
            + (a2 - a1 + b2 - b1) * digamma(a1 + b1))


def kl_and_gradient(params: AgentParams, average: AveragePolicy, states) -> tuple[np.ndarray, np.ndarray]:
    """Per-state KL(pi_avg || pi) and the gradient of their mean, flattened over trunk + policy branch."""
    states = np.atleast_2d(states)
    a1, b1 = average.shapes(states)
    h, tcache = nncore.forward_cache(params.trunk, states)
    o, pcache = nncore.forward_cache(params.policy, h)
    a2 = softplus(o[:, 0]) + SHAPE_OFFSET
    b2 = softplus(o[:, 1]) + SHAPE_OFFSET
    kl = beta_kl(a1, b1, a2, b2)
    psi = digamma(a2 + b2)
    psi1 = digamma(a1 + b1)
    d_a2 = digamma(a2) - psi - digamma(a1) + psi1
    d_b2 = digamma(b2) - psi - digamma(b1) + psi1
    n = len(states)
    up = np.stack([d_a2 * expit(o[:, 0]), d_b2 * expit(o[:, 1])], axis=1) / n
    pg = nncore.backward_cache(params.policy, pcache, up)
    tg = nncore.backward_cache(params.trunk, tcache, pg.input)
    return kl, nncore.flatten(tg.arrays() + pg.arrays())


def kl_gradient(params: AgentParams, average: AveragePolicy, state) -> np.ndarray:
    return kl_and_gradient(params, average, state)[1]


def trust_region_project(g, k, xi: float) -> np.ndarray:
    """Closest point to ``g`` in the half-space ``k . z <= xi``."""
    g = np.asarray(g, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if g.shape != k.shape:
        raise ShapeError("g and k must have the same length")
    kk = float(k @ k)
    if kk == 0.0:
        return g.copy()
    coef = max((float(k @ g) - xi) / kk, 0.0)
    return g - coef * k


def soft_update_average(average: AveragePolicy, params: AgentParams, alpha: float) -> AveragePolicy:
    new = [alpha * a + (1.0 - alpha) * p for a, p in zip(average.arrays(), params.policy_path())]
    if [a.shape for a in new] != [a.shape for a in average.arrays()]:
        raise ShapeError("average policy and live policy shapes differ")
    return average.with_arrays(new)


def replay_gradients(params: AgentParams, average: AveragePolicy, batch: list[Trajectory],
                     config: TrustRegionConfig) -> tuple[AgentGrads, dict]:
    """Batch-mean off-policy gradients with the policy part projected onto the trust region.

    The returned value gradients are descent directions (the negated off-policy value update).
    """
    n = len(batch)
    pol, val = None, None
    truncated, total = 0, 0
    states = []
    for traj in batch:
        rho, raw = trajectory_ratios(params, traj, config.c)
        truncated += int(np.sum(raw > config.c))
        total += len(traj)
        ptg, pg = off_policy_gradient(params, traj, config.c, ratios=rho)
        vtg, vg = off_value_gradient(params, traj, config.c, ratios=rho)
        p_flat = nncore.flatten(ptg.arrays() + pg.arrays())
        v_arrays = vtg.arrays() + vg.arrays()
        pol = p_flat if pol is None else pol + p_flat
        val = v_arrays if val is None else [a + b for a, b in zip(val, v_arrays)]
        states.append(traj.states)
    g = pol / n
    kl, k = kl_and_gradient(params, average, np.concatenate(states))
    z = trust_region_project(g, k, config.xi)
    z_arrays = nncore.unflatten(z, params.policy_path())
    nt = len(params.trunk.arrays())
    nvt = len(params.trunk.arrays())
    grads = AgentGrads(
        Gradients.from_arrays(z_arrays[:nt]),
        Gradients.from_arrays(z_arrays[nt:]),
        Gradients.from_arrays([-a / n for a in val[:nvt]]),
        Gradients.from_arrays([-a / n for a in val[nvt:]]),
    )
    diag = {
        "mean_kl": float(np.mean(kl)),
        "truncation_rate": truncated / max(total, 1),
        "projection_active": bool(np.any(z != g)),
    }
    return grads, diag


def replay_train_step(params: AgentParams, average: AveragePolicy, pool: ReplayPool, config: TrustRegionConfig,
                      lr_policy: float, lr_value: float, rng: np.random.Generator, optimizer=None
                      ) -> tuple[AgentParams, AveragePolicy, dict]:
    """Sample a batch, take one projected policy step and one value step, then move the average policy.

    With ``optimizer`` (an ``AgentOptimizer``) the projected directions are fed to Adam; otherwise plain steps.
    """
    if len(pool) == 0:
        return params, average, {"mean_kl": 0.0, "truncation_rate": 0.0, "skipped": True}
    batch = pool.sample(config.batch_size, rng)
    grads, diag = replay_gradients(params, average, batch, config)
    if optimizer is None:
        new = apply_agent_step(params, grads, lr_policy, lr_value)
    else:
        new = optimizer.step(params, grads, lr_policy, lr_value)
    average = soft_update_average(average, new, config.alpha)
    diag["skipped"] = False
    return new, average, diag
