"""Temporal-convolution attention for video segments and the stills/segments combination."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import env as envmod
from . import nncore
from .nncore import ShapeError

HIDDEN_CHANNELS = 64
WIDTH = 3


@dataclass
class TempConvNet:
    w1: np.ndarray  # [64, d, 3]
    b1: np.ndarray  # [64]
    w2: np.ndarray  # [1, 64, 3]
    b2: np.ndarray  # [1]

    @property
    def embed_dim(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def with_arrays(self, arrays) -> "TempConvNet":
        arrs = [np.array(a, dtype=np.float64) for a in arrays]
        if [a.shape for a in arrs] != [a.shape for a in self.arrays()]:
            raise ShapeError("shape mismatch")
        return TempConvNet(*arrs)

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_tempconv(embed_dim: int, rng: np.random.Generator, hidden: int = HIDDEN_CHANNELS) -> TempConvNet:
    b1 = np.sqrt(6.0 / (WIDTH * embed_dim + hidden))
    b2 = np.sqrt(6.0 / (WIDTH * hidden + 1))
    return TempConvNet(
        rng.uniform(-b1, b1, size=(hidden, embed_dim, WIDTH)),
        np.zeros(hidden),
        rng.uniform(-b2, b2, size=(1, hidden, WIDTH)),
        np.zeros(1),
    )


def _conv(xp: np.ndarray, w: np.ndarray, b: np.ndarray, length: int) -> np.ndarray:
    # xp: [L+2, c_in] zero-padded; w: [c_out, c_in, 3]
    out = np.tile(b, (length, 1))
    for k in range(WIDTH):
        out += xp[k:k + length] @ w[:, :, k].T
    return out


def _pad(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((1, 1), (0, 0)))


def scores_cache(net: TempConvNet, frames):
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ShapeError("need a non-empty [frames, dim] sequence")
    if x.shape[1] != net.embed_dim:
        raise ShapeError(f"frames have dim {x.shape[1]}, net expects {net.embed_dim}")
    L = len(x)
    xp = _pad(x)
    z1 = _conv(xp, net.w1, net.b1, L)
    h = np.maximum(z1, 0.0)
    hp = _pad(h)
    s = _conv(hp, net.w2, net.b2, L)[:, 0]
    return s, (xp, z1, hp)


def frame_scores(net: TempConvNet, frames) -> np.ndarray:
    """Pre-softmax score per frame."""
    return scores_cache(net, frames)[0]


def temporal_attention(net: TempConvNet, frames) -> np.ndarray:
    return nncore.softmax(frame_scores(net, frames))


def scores_backward(net: TempConvNet, cache, ds: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients of ``<ds, frame_scores>``."""
    xp, z1, hp = cache
    L = len(ds)
    gw2 = np.zeros_like(net.w2)
    dhp = np.zeros_like(hp)
    for k in range(WIDTH):
        gw2[0, :, k] = ds @ hp[k:k + L]
        dhp[k:k + L] += np.outer(ds, net.w2[0, :, k])
    gb2 = np.array([ds.sum()])
    dz1 = dhp[1:-1] * (z1 > 0.0)
    gw1 = np.zeros_like(net.w1)
    for k in range(WIDTH):
        gw1[:, :, k] = dz1.T @ xp[k:k + L]
    gb1 = dz1.sum(axis=0)
    return [gw1, gb1, gw2, gb2]


def segment_loss_and_grad(net: TempConvNet, frames, label: int, head: envmod.RewardHead) -> tuple[float, list[np.ndarray]]:
    """Cross-entropy of the head on the attention-weighted frame mean, and its parameter gradient."""
    x = np.asarray(frames, dtype=np.float64)
    s, cache = scores_cache(net, x)
    w = nncore.softmax(s)
    agg = w @ x
    logits, hcache = nncore.forward_cache(head.net, agg)
    loss = nncore.cross_entropy(logits, label)
    dlogits = nncore.cross_entropy_grad(logits, label)
    dagg = nncore.backward_cache(head.net, hcache, dlogits[None, :]).input[0]
    dw = x @ dagg
    ds = w * (dw - w @ dw)
    return loss, scores_backward(net, cache, ds)


def temporal_batch_grad(net: TempConvNet, episodes, head: envmod.RewardHead) -> tuple[float, list[np.ndarray]]:
    if len(episodes) == 0:
        raise ShapeError("empty batch")
    total = 0.0
    grads = [np.zeros_like(a) for a in net.arrays()]
    for frames, label in episodes:
        loss, g = segment_loss_and_grad(net, frames, label, head)
        total += loss
        grads = [a + b for a, b in zip(grads, g)]
    n = len(episodes)
    return total / n, [g / n for g in grads]


def train_temporal(net: TempConvNet, episodes, head: envmod.RewardHead, lr: float, optimizer: nncore.Adam | None = None) -> TempConvNet:
    """One descent step on the batch-mean cross-entropy; Adam when ``optimizer`` is given."""
    _, grads = temporal_batch_grad(net, episodes, head)
    if optimizer is None:
        return net.with_arrays([a - lr * g for a, g in zip(net.arrays(), grads)])
    return net.with_arrays(optimizer.step(net.arrays(), grads, lr))


@dataclass
class SetPartition:
    stills: np.ndarray
    segments: list[tuple[int, np.ndarray]]

    def validate(self, n_items: int) -> None:
        covered = np.concatenate([np.asarray(self.stills, dtype=np.int64)] + [np.asarray(ix, dtype=np.int64) for _, ix in self.segments])
        if sorted(covered.tolist()) != list(range(n_items)):
            raise ShapeError("partition must cover every item exactly once")

    @property
    def num_units(self) -> int:
        return len(self.stills) + len(self.segments)


def partition_set(fset) -> SetPartition:
    return SetPartition(fset.stills(), list(fset.segments().items()))


def collapse_segments(partition: SetPartition, temporal_weights, features) -> np.ndarray:
    """Unit features: the stills followed by one attention-weighted pseudo-feature per segment."""
    f = np.asarray(features, dtype=np.float64)
    if len(temporal_weights) != len(partition.segments):
        raise ShapeError("one temporal weight vector per segment is required")
    units = [f[i] for i in partition.stills]
    for (_, idx), w in zip(partition.segments, temporal_weights):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (len(idx),):
            raise ShapeError("temporal weights do not match segment length")
        units.append(w @ f[idx])
    return np.array(units)


def combine(partition: SetPartition, dac_weights, temporal_weights, features) -> np.ndarray:
    """Weighted mean over stills and collapsed segments.

    ``dac_weights`` covers the stills and then the segment pseudo-items; when it
    only covers the stills, every pseudo-item weighs 1.
    """
    f = np.asarray(features, dtype=np.float64)
    partition.validate(len(f))
    a = np.asarray(dac_weights, dtype=np.float64)
    if len(a) == len(partition.stills):
        a = np.concatenate([a, np.ones(len(partition.segments))])
    if len(a) != partition.num_units:
        raise ShapeError("DAC weights must cover the stills (and optionally the segments)")
    units = collapse_segments(partition, temporal_weights, f)
    return envmod.aggregate(units, a)


def item_weights(partition: SetPartition, dac_weights, temporal_weights, n_items: int) -> np.ndarray:
    """Effective per-item weights: DAC weight of the unit times the temporal weight inside a segment."""
    a = np.asarray(dac_weights, dtype=np.float64)
    if len(a) == len(partition.stills):
        a = np.concatenate([a, np.ones(len(partition.segments))])
    out = np.zeros(n_items)
    out[np.asarray(partition.stills, dtype=np.int64)] = a[: len(partition.stills)]
    for j, ((_, idx), w) in enumerate(zip(partition.segments, temporal_weights)):
        out[idx] = a[len(partition.stills) + j] * np.asarray(w)
    return out
