"""Pose-guided set representations.

Parameter-free: a set becomes (general aggregate, frontal aggregate, profile
aggregate) plus the weight mass of each pose group, and two sets are compared
with five L2 distances. Metric-learning: a projection head is trained so that
frontal/left/right centroids of a set spread apart while matching centroids of
genuine probe/gallery pairs pull together; at test time probe items take the
pose group of the nearest gallery centroid and sets are compared by their
closest pair of corresponding centroids.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import env as envmod
from . import nncore
from .nncore import DenseNet, ShapeError

FRONTAL_LIMIT = 30.0
FRONTAL, LEFT, RIGHT = 1, 2, 3
GROUP_PAIRS = ((0, 1), (0, 2), (1, 2))


def l2(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def mirror(features, pose_dir) -> np.ndarray:
    """Reflect embeddings across the hyperplane orthogonal to the pose direction."""
    f = np.asarray(features, dtype=np.float64)
    u = np.asarray(pose_dir, dtype=np.float64)
    return f - 2.0 * np.outer(f @ u, u) if f.ndim == 2 else f - 2.0 * (f @ u) * u


@dataclass
class PoseRepresentation:
    general: np.ndarray
    frontal: np.ndarray
    profile: np.ndarray
    p_frontal: float
    p_profile: float

    def aggregates(self) -> list[np.ndarray]:
        return [self.frontal, self.profile]

    def masses(self) -> list[float]:
        return [self.p_frontal, self.p_profile]


def _group_mean(features: np.ndarray, weights: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, float]:
    if not mask.any():
        return np.zeros(features.shape[1]), 0.0
    w = weights[mask]
    p = float(w.sum())
    if p <= 0.0:
        return features[mask].mean(axis=0), 0.0
    return w @ features[mask] / p, p


def pose_split(features, yaw, weights, pose_dir=None, normalize: bool = False) -> PoseRepresentation:
    """Frontal (|yaw| <= 30) and profile (> 30) weighted aggregates; left profiles are mirrored first.

    With ``normalize`` the group masses are divided by the total weight.
    """
    f = np.asarray(features, dtype=np.float64)
    yaw = np.asarray(yaw, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if not (len(f) == len(yaw) == len(w)):
        raise ShapeError("features, yaw and weights must align")
    general = envmod.floored_aggregate(f, w)
    frontal_mask = np.abs(yaw) <= FRONTAL_LIMIT
    profile_mask = ~frontal_mask
    g = f
    if pose_dir is not None:
        left = yaw < -FRONTAL_LIMIT
        g = f.copy()
        if left.any():
            g[left] = mirror(f[left], pose_dir)
    f1, p1 = _group_mean(f, w, frontal_mask)
    f2, p2 = _group_mean(g, w, profile_mask)
    if normalize:
        total = w.sum()
        if total > 0:
            p1, p2 = p1 / total, p2 / total
    return PoseRepresentation(general, f1, f2, p1, p2)


def pf_pgr_distance(a: PoseRepresentation, b: PoseRepresentation,
                    dist: Callable[[np.ndarray, np.ndarray], float] = l2) -> float:
    """General-aggregate distance plus the four cross-pose distances weighted by mass products."""
    if a.general.shape != b.general.shape:
        raise ShapeError("representations differ in dimension")
    d = dist(a.general, b.general)
    for fa, pa in zip(a.aggregates(), a.masses()):
        for fb, pb in zip(b.aggregates(), b.masses()):
            d += dist(fa, fb) * pa * pb
    return float(d)


@dataclass
class CentroidTriple:
    """Frontal, left and right centroids (rows 0, 1, 2) with presence flags."""

    centroids: np.ndarray
    present: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=bool))

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        if self.centroids.ndim != 2 or self.centroids.shape[0] != 3 or self.present.shape != (3,):
            raise ShapeError("need a [3, d] centroid array and 3 presence flags")
        if not np.all(np.isfinite(self.centroids[self.present])):
            raise ValueError("present centroids must be finite")


@dataclass
class MLPGRThresholds:
    beta: float = 1.0
    phi: float = 5.0

    def __post_init__(self):
        if self.beta <= 0 or self.phi <= 0:
            raise ValueError("beta and phi must be positive")


def pose_groups(yaw) -> np.ndarray:
    """Group id per item: 1 frontal, 2 left profile, 3 right profile."""
    yaw = np.asarray(yaw, dtype=np.float64)
    g = np.full(len(yaw), FRONTAL)
    g[yaw < -FRONTAL_LIMIT] = LEFT
    g[yaw > FRONTAL_LIMIT] = RIGHT
    return g


def centroids_from_groups(features, groups, weights=None) -> CentroidTriple:
    f = np.asarray(features, dtype=np.float64)
    groups = np.asarray(groups)
    w = np.ones(len(f)) if weights is None else np.asarray(weights, dtype=np.float64)
    c = np.zeros((3, f.shape[1]))
    present = np.zeros(3, dtype=bool)
    for gi in range(3):
        mask = groups == gi + 1
        if mask.any():
            present[gi] = True
            c[gi] = envmod.floored_aggregate(f[mask], w[mask])
    return CentroidTriple(c, present)


def _hinge_terms(triple_a: CentroidTriple, triple_b: CentroidTriple, same_identity: bool,
                 th: MLPGRThresholds, literal_missing: bool):
    """Yield (kind, a_ref, b_ref, distance, loss, dloss/ddistance) for every term of the loss.

    ``a_ref``/``b_ref`` are ("p" | "g", group index) or None for absent groups.
    """
    l = 0.0 if same_identity else 1.0
    for name, t in (("p", triple_a), ("g", triple_b)):
        for i, j in GROUP_PAIRS:
            if t.present[i] and t.present[j]:
                D = l2(t.centroids[i], t.centroids[j])
                h = max(th.beta - D, 0.0)
                yield (name, i), (name, j), D, h * h, -2.0 * h
            elif literal_missing:
                yield None, None, 0.0, th.beta ** 2, 0.0
    for i in range(3):
        if triple_a.present[i] and triple_b.present[i]:
            d = l2(triple_a.centroids[i], triple_b.centroids[i])
            h = max(th.phi - d, 0.0)
            loss = (1 - l) * d * d + l * h * h
            yield ("p", i), ("g", i), d, loss, (1 - l) * 2.0 * d - l * 2.0 * h
        elif literal_missing:
            yield None, None, 0.0, l * th.phi ** 2, 0.0


def ml_pgr_loss(probe: CentroidTriple, gallery: CentroidTriple, same_identity: bool,
                thresholds: MLPGRThresholds = MLPGRThresholds(), literal_missing: bool = False) -> float:
    """Pose-group margin loss; terms involving an absent group are dropped unless ``literal_missing``."""
    if probe.centroids.shape != gallery.centroids.shape:
        raise ShapeError("centroid dimensions differ")
    return float(sum(t[3] for t in _hinge_terms(probe, gallery, same_identity, thresholds, literal_missing)))


def ml_pgr_loss_grad(probe: CentroidTriple, gallery: CentroidTriple, same_identity: bool,
                     thresholds: MLPGRThresholds = MLPGRThresholds()) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and its gradient w.r.t. the probe and gallery centroid arrays."""
    gp = np.zeros_like(probe.centroids)
    gg = np.zeros_like(gallery.centroids)
    total = 0.0
    arrays = {"p": (probe.centroids, gp), "g": (gallery.centroids, gg)}
    for ra, rb, dist, loss, dl in _hinge_terms(probe, gallery, same_identity, thresholds, False):
        total += loss
        if dist == 0.0 or dl == 0.0:
            continue
        ca, ga = arrays[ra[0]]
        cb, gb = arrays[rb[0]]
        u = (ca[ra[1]] - cb[rb[1]]) / dist
        ga[ra[1]] += dl * u
        gb[rb[1]] -= dl * u
    return total, gp, gg


@dataclass
class SetPair:
    probe_features: np.ndarray
    probe_yaw: np.ndarray
    probe_label: int
    gallery_features: np.ndarray
    gallery_yaw: np.ndarray
    gallery_label: int


def _set_terms(embedder: DenseNet, head: envmod.RewardHead, pair: SetPair, th: MLPGRThresholds):
    """Loss of one pair and the upstream gradient for every projected item (probe rows then gallery rows)."""
    x = np.vstack([pair.probe_features, pair.gallery_features])
    z, cache = nncore.forward_cache(embedder, x)
    n_p = len(pair.probe_features)
    zp, zg = z[:n_p], z[n_p:]
    up = np.zeros_like(z)
    total = 0.0
    for rows, zz, label in ((slice(0, n_p), zp, pair.probe_label), (slice(n_p, None), zg, pair.gallery_label)):
        m = zz.mean(axis=0)
        logits, hc = nncore.forward_cache(head.net, m)
        total += nncore.cross_entropy(logits, label)
        dm = nncore.backward_cache(head.net, hc, nncore.cross_entropy_grad(logits, label)[None, :]).input[0]
        up[rows] += dm / len(zz)
    gp_groups, gg_groups = pose_groups(pair.probe_yaw), pose_groups(pair.gallery_yaw)
    tp, tg = centroids_from_groups(zp, gp_groups), centroids_from_groups(zg, gg_groups)
    loss, dcp, dcg = ml_pgr_loss_grad(tp, tg, pair.probe_label == pair.gallery_label, th)
    total += loss
    for groups, dc, offset in ((gp_groups, dcp, 0), (gg_groups, dcg, n_p)):
        for gi in range(3):
            idx = np.flatnonzero(groups == gi + 1)
            if len(idx):
                up[offset + idx] += dc[gi] / len(idx)
    return total, up, cache


def ml_pgr_objective_and_grad(embedder: DenseNet, pairs: list[SetPair], head: envmod.RewardHead,
                              thresholds: MLPGRThresholds = MLPGRThresholds()) -> tuple[float, nncore.Gradients]:
    """Mean over pairs of (cross-entropy of both sets + pose-group margin loss) and its embedder gradient."""
    if len(pairs) == 0:
        raise ShapeError("empty batch")
    total = 0.0
    grads = None
    for pair in pairs:
        loss, up, cache = _set_terms(embedder, head, pair, thresholds)
        total += loss
        g = nncore.backward_cache(embedder, cache, up)
        grads = g if grads is None else grads + g
    n = len(pairs)
    return total / n, grads.scale(1.0 / n)


def ml_pgr_train(embedder: DenseNet, pairs: list[SetPair], head: envmod.RewardHead,
                 thresholds: MLPGRThresholds, lr: float, optimizer: nncore.Adam | None = None) -> DenseNet:
    _, grads = ml_pgr_objective_and_grad(embedder, pairs, head, thresholds)
    if optimizer is None:
        return nncore.apply_step(embedder, grads, -lr)
    return embedder.with_arrays(optimizer.step(embedder.arrays(), grads.arrays(), lr))


def identity_projection(embed_dim: int) -> DenseNet:
    return DenseNet([nncore.Layer(np.eye(embed_dim), np.zeros(embed_dim), "identity")])


def assign_pose_by_centroid(feature, gallery: CentroidTriple) -> int:
    """Group id (1-3) of the nearest present gallery centroid; ties go to the lower id."""
    if not gallery.present.any():
        raise ShapeError("no gallery centroid present")
    f = np.asarray(feature, dtype=np.float64)
    best, best_d = 0, np.inf
    for gi in range(3):
        if gallery.present[gi]:
            d = l2(f, gallery.centroids[gi])
            if d < best_d:
                best, best_d = gi, d
    return best + 1


def ml_pgr_similarity(probe: CentroidTriple, gallery: CentroidTriple, fallback=None) -> float:
    """Smallest distance between corresponding centroids present in both sets (lower is more alike).

    Without a common group, ``fallback`` (probe aggregate, gallery aggregate) is compared instead.
    """
    common = probe.present & gallery.present
    if not common.any():
        if fallback is None:
            raise ShapeError("no pose group in common and no fallback given")
        return l2(*fallback)
    return min(l2(probe.centroids[i], gallery.centroids[i]) for i in np.flatnonzero(common))


def probe_centroids_for_gallery(probe_features, probe_weights, gallery: CentroidTriple) -> CentroidTriple:
    """Group probe items by their nearest gallery centroid and take weighted centroids."""
    groups = np.array([assign_pose_by_centroid(f, gallery) for f in np.asarray(probe_features)])
    return centroids_from_groups(probe_features, groups, probe_weights)
