"""Test-time pipeline: aggregate sets with a trained model and score them under each protocol."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import env as envmod
from . import evaluation as ev
from . import nncore
from . import pgr as pgrmod
from . import temporal as tmp
from .agent import rollout
from .synth import FeatureSet, FeatureSetCollection, estimate_pose_direction
from .training import Model, episode_units

BASELINES = ("meanpool", "maxpool", "dac", "dac-binary")
PROTOCOLS = ("verification", "closed_id", "open_id")
PGR_MODES = ("none", "parameter_free", "metric_learning")


@dataclass
class Aggregated:
    fset: FeatureSet
    vector: np.ndarray
    weights: np.ndarray  # effective per-item weights
    traversed: int  # decision steps taken by the agent (units for meanpool/maxpool)
    units: int


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("SETPOOL_THREADS", "1")))
    except ValueError:
        return 1


def aggregate_set(model: Model, fset: FeatureSet, baseline: str = "dac", threshold: float | None = None,
                  use_temporal: bool | None = None) -> Aggregated:
    """Aggregate one set. Segments are collapsed by temporal attention first when enabled."""
    if baseline not in BASELINES:
        raise ValueError(f"unknown baseline {baseline!r}")
    f = fset.embeddings
    units, partition, tw = episode_units(model, fset, use_temporal)

    traversed = len(units)
    if baseline == "maxpool":
        return Aggregated(fset, units.max(axis=0), np.ones(len(f)), traversed, len(units))
    if baseline == "meanpool":
        a = np.ones(len(units))
    else:
        mode = "mode" if baseline == "dac" else "binary"
        _, st = rollout(model.agent, units, 0, model.head, None, mode=mode, threshold=threshold)
        a = st.weights
        traversed = st.cursor
    vector = envmod.floored_aggregate(units, a)
    if a.sum() < envmod.WEIGHT_FLOOR:
        a = np.ones_like(a)
    weights = tmp.item_weights(partition, a, tw, len(f)) if partition is not None else a
    return Aggregated(fset, vector, weights, traversed, len(units))


def aggregate_all(model: Model, sets: list[FeatureSet], baseline: str, threshold: float | None = None,
                  use_temporal: bool | None = None) -> list[Aggregated]:
    return [aggregate_set(model, fs, baseline, threshold, use_temporal) for fs in sets]


class CountingDistance:
    """L2 distance that counts its calls."""

    def __init__(self):
        self.calls = 0

    def __call__(self, a, b) -> float:
        self.calls += 1
        return pgrmod.l2(a, b)


class Scorer:
    """Distance between two aggregated sets under a PGR mode (lower is more alike)."""

    def __init__(self, model: Model, mode: str = "none", pose_dir=None, normalize_masses: bool = False):
        if mode not in PGR_MODES:
            raise ValueError(f"unknown pgr mode {mode!r}")
        self.model, self.mode = model, mode
        self.pose_dir = pose_dir
        self.normalize = normalize_masses
        self._cache: dict[int, object] = {}

    def _pf(self, agg: Aggregated) -> pgrmod.PoseRepresentation:
        key = id(agg)
        if key not in self._cache:
            fs = agg.fset
            self._cache[key] = pgrmod.pose_split(fs.embeddings, fs.yaw, agg.weights, self.pose_dir, self.normalize)
        return self._cache[key]

    def _projected(self, agg: Aggregated) -> np.ndarray:
        key = id(agg)
        if key not in self._cache:
            self._cache[key] = nncore.forward(self.model.projection, agg.fset.embeddings)
        return self._cache[key]

    def prepare(self, aggs: list[Aggregated]) -> None:
        """Fill the per-set caches up front so concurrent scoring only reads them."""
        for a in aggs:
            if self.mode == "parameter_free":
                self._pf(a)
            elif self.mode == "metric_learning":
                self._projected(a)

    def distance(self, probe: Aggregated, gallery: Aggregated, dist=pgrmod.l2) -> float:
        if self.mode == "none":
            return dist(probe.vector, gallery.vector)
        if self.mode == "parameter_free":
            return pgrmod.pf_pgr_distance(self._pf(probe), self._pf(gallery), dist)
        zp, zg = self._projected(probe), self._projected(gallery)
        g = pgrmod.centroids_from_groups(zg, pgrmod.pose_groups(gallery.fset.yaw), gallery.weights)
        p = pgrmod.probe_centroids_for_gallery(zp, probe.weights, g)
        fallback = (envmod.floored_aggregate(zp, probe.weights), envmod.floored_aggregate(zg, gallery.weights))
        return pgrmod.ml_pgr_similarity(p, g, fallback)


def score_matrix(scorer: Scorer, probes: list[Aggregated], gallery: list[Aggregated]) -> np.ndarray:
    """Similarities (negated distances) of every probe against every gallery entry."""
    scorer.prepare(probes + gallery)

    def row(p):
        return [-scorer.distance(p, g) for g in gallery]

    threads = eval_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, probes))
    else:
        rows = [row(p) for p in probes]
    return np.array(rows, dtype=np.float64).reshape(len(probes), len(gallery))


def open_set_split(gallery: list[FeatureSet], fraction: float, seed: int) -> tuple[list[FeatureSet], set[int]]:
    """Drop ``fraction`` of the gallery identities; returns the kept gallery and the withheld identities."""
    ids = np.unique([fs.identity for fs in gallery])
    n_out = int(round(fraction * len(ids)))
    withheld = set(np.random.default_rng(seed).permutation(ids)[:n_out].tolist())
    return [fs for fs in gallery if fs.identity not in withheld], withheld


@dataclass
class EvalResult:
    summary: dict
    curves: dict[str, tuple[list[str], list]]
    probes: list[Aggregated]
    gallery: list[Aggregated]


def evaluate(model: Model, collection: FeatureSetCollection, protocol: str = "closed_id", baseline: str = "dac",
             pgr_mode: str = "none", threshold: float | None = None, seed: int | None = None,
             use_temporal: bool | None = None) -> EvalResult:
    """Aggregate probe and gallery sets and compute the protocol's metrics."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if protocol == "open_id" and threshold is not None:
        raise ValueError("softmax termination cannot be used for open-set identification")
    cfg = model.config
    seed = cfg.seed if seed is None else seed
    probe_sets = collection.sets("probe")
    gallery_sets = collection.sets("gallery")
    if not probe_sets or not gallery_sets:
        raise ValueError("evaluation needs probe and gallery sets")
    if protocol == "open_id":
        gallery_sets, _ = open_set_split(gallery_sets, cfg.eval.withheld_fraction, seed)
    probes = aggregate_all(model, probe_sets, baseline, threshold, use_temporal)
    gallery = aggregate_all(model, gallery_sets, baseline, None, use_temporal)

    pose_dir = None
    if pgr_mode == "parameter_free":
        pose_dir = collection.pose_direction if collection.pose_direction is not None else estimate_pose_direction(collection)
    scorer = Scorer(model, pgr_mode, pose_dir, cfg.pgr.normalize_masses)
    scores = score_matrix(scorer, probes, gallery)
    g_labels = np.array([g.fset.identity for g in gallery])
    p_labels = np.array([p.fset.identity for p in probes])

    summary: dict = {
        "protocol": protocol, "baseline": baseline, "pgr": pgr_mode,
        "num_probes": len(probes), "num_gallery": len(gallery),
        "mean_traversed": float(np.mean([p.traversed for p in probes])),
        "mean_units": float(np.mean([p.units for p in probes])),
    }
    curves: dict[str, tuple[list[str], list]] = {}
    if protocol == "verification":
        pairs = ev.ScoredPairs(scores.ravel(), (p_labels[:, None] == g_labels[None, :]).ravel())
        for far in cfg.eval.far:
            summary[f"tar@far={far:g}"] = ev.tar_at_far(pairs, far)
        curves["roc"] = (["threshold", "far", "tar"], ev.roc_curve(pairs))
    else:
        run = ev.IdentificationRun(scores, g_labels, p_labels, open_set=protocol == "open_id")
        ranks = [k for k in cfg.eval.ranks if k <= len(gallery)]
        for k, v in ev.cmc_curve(run, ranks):
            summary[f"rank{k}"] = v
        curves["cmc"] = (["rank", "accuracy"], ev.cmc_curve(run, range(1, len(gallery) + 1)))
        if protocol == "open_id":
            for fpir in cfg.eval.fpir:
                summary[f"tpir@fpir={fpir:g}"] = ev.tpir_at_fpir(run, fpir)
            summary["num_nonmated"] = int((~run.mated).sum())
        else:
            known = [i for i, p in enumerate(probes) if p.fset.identity in set(model.classes.tolist())]
            if known:
                summary["head_accuracy"] = ev.closed_set_accuracy(
                    model.head, np.array([probes[i].vector for i in known]),
                    [model.class_index(probes[i].fset.identity) for i in known])
    return EvalResult(summary, curves, probes, gallery)


def weight_trace_rows(aggs: list[Aggregated]) -> list[dict]:
    return ev.weight_trace_rows([a.fset.set_id for a in aggs], [a.weights for a in aggs], [a.fset for a in aggs])
