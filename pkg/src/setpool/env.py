"""The set-aggregation decision process.

An episode walks once over the items of a set. Every weight starts at 1; at
each step the agent replaces the current item's weight with its action. The
state is the leave-one-out weighted mean of the other items concatenated with
the current item, and the reward is the drop in the classifier head's
cross-entropy on the weighted aggregate plus a hinge bonus for lowering the
weight.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .nncore import DenseNet, ShapeError

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-6


class DegenerateWeightsError(ValueError):
    pass


def aggregate(features, weights) -> np.ndarray:
    """Weighted mean ``sum a_i f_i / sum a_i``."""
    f = np.asarray(features, dtype=np.float64)
    a = np.asarray(weights, dtype=np.float64)
    if f.ndim != 2 or a.shape != (f.shape[0],) or f.shape[0] == 0:
        raise ShapeError(f"features {f.shape} and weights {a.shape} do not align")
    total = a.sum()
    if total <= 0.0:
        raise DegenerateWeightsError("weights sum to zero")
    return a @ f / total


def floored_aggregate(features, weights) -> np.ndarray:
    """``aggregate`` that falls back to the plain mean when the weights nearly vanish."""
    a = np.asarray(weights, dtype=np.float64)
    if a.sum() < WEIGHT_FLOOR:
        a = np.ones_like(a)
    return aggregate(features, a)


@dataclass
class RewardHead:
    net: DenseNet
    lam: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @property
    def num_classes(self) -> int:
        return self.net.output_dim

    def logits(self, x) -> np.ndarray:
        return nncore.forward(self.net, x)

    def loss(self, x, label: int) -> float:
        return nncore.cross_entropy(self.logits(x), label)


def make_reward_head(embed_dim: int, num_classes: int, rng: np.random.Generator, lam: float = 0.1, hidden: int = 64) -> RewardHead:
    net = nncore.init_dense([embed_dim, hidden, num_classes], ["relu", "identity"], rng)
    return RewardHead(net, lam)


@dataclass
class EpisodeState:
    features: np.ndarray  # [T, d]
    weights: np.ndarray
    order: np.ndarray
    cursor: int = 0
    done: bool = False

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        T = len(self.features)
        if T < 1:
            raise ShapeError("an episode needs at least one item")
        if self.weights is None:
            self.weights = np.ones(T)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.order = np.asarray(self.order, dtype=np.int64)
        if self.weights.shape != (T,) or sorted(self.order.tolist()) != list(range(T)):
            raise ShapeError("weights/order do not match the feature count")

    @property
    def size(self) -> int:
        return len(self.features)

    @property
    def current(self) -> int:
        return int(self.order[self.cursor])

    @property
    def visited(self) -> np.ndarray:
        return self.order[: self.cursor]


def new_episode(features, order=None, rng: np.random.Generator | None = None) -> EpisodeState:
    """Fresh episode; a random traversal order when ``rng`` is given, else input order."""
    T = len(features)
    if order is None:
        order = rng.permutation(T) if rng is not None else np.arange(T)
    return EpisodeState(np.asarray(features, dtype=np.float64), np.ones(T), np.asarray(order))


def build_state(state: EpisodeState) -> np.ndarray:
    f, a = state.features, state.weights
    t = state.current
    ft = f[t]
    if state.size == 1:
        return np.concatenate([np.zeros_like(ft), ft])
    # the current item is unvisited, so its weight is 1 here
    rest_w = a.sum() - a[t]
    if rest_w < WEIGHT_FLOOR:
        mask = np.arange(state.size) != t
        context = f[mask].mean(axis=0)
    else:
        context = (a @ f - a[t] * ft) / rest_w
    return np.concatenate([context, ft])


@dataclass
class StepOutcome:
    next_state: np.ndarray | None
    reward: float
    done: bool
    loss_before: float = 0.0
    loss_after: float = 0.0
    terminated_early: bool = field(default=False)


def softmax_terminated(head: RewardHead, aggregated, threshold: float) -> bool:
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    return bool(nncore.softmax(head.logits(aggregated)).max() >= threshold)


def step(state: EpisodeState, action: float, head: RewardHead, label: int,
         threshold: float | None = None, loss_before: float | None = None) -> StepOutcome:
    """Apply ``action`` as the current item's weight and advance the cursor.

    ``loss_before`` may be passed to reuse the previous step's post-update loss.
    """
    if state.done:
        raise RuntimeError("episode already finished")
    a = float(action)
    if not 0.0 <= a <= 1.0:
        log.warning("action %r outside [0, 1]; clamped", a)
        a = min(max(a, 0.0), 1.0)
    if loss_before is None:
        loss_before = head.loss(floored_aggregate(state.features, state.weights), label)
    state.weights[state.current] = a
    after = floored_aggregate(state.features, state.weights)
    loss_after = head.loss(after, label)
    reward = loss_before - loss_after + head.lam * max(0.0, 1.0 - a)
    state.cursor += 1
    early = False
    if state.cursor >= state.size:
        state.done = True
    elif threshold is not None and softmax_terminated(head, after, threshold):
        state.done = True
        early = True
    nxt = None if state.done else build_state(state)
    return StepOutcome(nxt, reward, state.done, loss_before, loss_after, early)


def head_loss_and_grad(head: RewardHead, xs: np.ndarray, labels) -> tuple[float, nncore.Gradients]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the head parameters."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if len(xs) == 0:
        raise ShapeError("empty batch")
    out, cache = nncore.forward_cache(head.net, xs)
    if np.any(labels < 0) or np.any(labels >= head.num_classes):
        raise ShapeError("label outside the head's class range")
    p = nncore.softmax(out)
    n = len(xs)
    loss = float(-np.log(p[np.arange(n), labels]).mean())
    up = p.copy()
    up[np.arange(n), labels] -= 1.0
    grads = nncore.backward_cache(head.net, cache, up / n)
    return loss, grads


def train_reward_head(head: RewardHead, xs, labels, lr: float) -> RewardHead:
    """One plain gradient-descent step on the mean cross-entropy."""
    _, grads = head_loss_and_grad(head, xs, labels)
    return RewardHead(nncore.apply_step(head.net, grads, -lr), head.lam)
