"""Verification and identification metrics.

Scores are similarities: higher means more alike, and a score accepts at a
threshold when ``score >= threshold``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import nncore


@dataclass
class ScoredPairs:
    scores: np.ndarray
    genuine: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.genuine = np.asarray(self.genuine, dtype=bool)
        if self.scores.shape != self.genuine.shape or self.scores.ndim != 1:
            raise ValueError("scores and genuine flags must align")
        if len(self.scores) == 0 or not np.all(np.isfinite(self.scores)):
            raise ValueError("need a non-empty list of finite scores")


def _threshold_for_rate(negatives: np.ndarray, rate: float) -> float:
    """Smallest candidate threshold whose acceptance rate over ``negatives`` is <= ``rate``."""
    neg = np.sort(negatives)[::-1]
    n = len(neg)
    allowed = int(np.floor(rate * n + 1e-12))
    if allowed >= n:
        return -np.inf
    # every negative >= t is accepted, so t must exceed neg[allowed]
    return float(np.nextafter(neg[allowed], np.inf))


def tar_at_far(pairs: ScoredPairs, far: float) -> float:
    if not 0.0 < far < 1.0:
        raise ValueError("far must be in (0, 1)")
    gen = pairs.scores[pairs.genuine]
    imp = pairs.scores[~pairs.genuine]
    if len(gen) == 0 or len(imp) == 0:
        raise ValueError("need both genuine and impostor pairs")
    t = _threshold_for_rate(imp, far)
    # the smallest score value at or above t is the same operating point
    return float(np.mean(gen >= t))


def roc_curve(pairs: ScoredPairs) -> list[tuple[float, float, float]]:
    """(threshold, far, tar) at every distinct score, descending threshold."""
    gen = pairs.scores[pairs.genuine]
    imp = pairs.scores[~pairs.genuine]
    rows = []
    for t in np.unique(pairs.scores)[::-1]:
        rows.append((float(t), float(np.mean(imp >= t)), float(np.mean(gen >= t))))
    return rows


@dataclass
class IdentificationRun:
    """Similarity of every probe to every gallery entry.

    ``probe_labels`` may contain identities missing from ``gallery_labels``
    (non-mated probes of an open-set run).
    """

    scores: np.ndarray  # [probes, gallery]
    gallery_labels: np.ndarray
    probe_labels: np.ndarray
    open_set: bool = False

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        self.gallery_labels = np.asarray(self.gallery_labels)
        self.probe_labels = np.asarray(self.probe_labels)
        if self.scores.shape != (len(self.probe_labels), len(self.gallery_labels)):
            raise ValueError("score matrix does not match label lists")

    def rankings(self) -> np.ndarray:
        """Gallery indices per probe, descending score, ties by gallery index."""
        return np.argsort(-self.scores, axis=1, kind="stable")

    @property
    def mated(self) -> np.ndarray:
        return np.isin(self.probe_labels, self.gallery_labels)


def true_ranks(run: IdentificationRun) -> np.ndarray:
    """1-based rank of the mated gallery entry for each probe (0 for non-mated probes)."""
    order = run.rankings()
    ranked = run.gallery_labels[order]
    hits = ranked == run.probe_labels[:, None]
    return np.where(hits.any(axis=1), hits.argmax(axis=1) + 1, 0)


def cmc(run: IdentificationRun, k: int) -> float:
    if not 1 <= k <= len(run.gallery_labels):
        raise ValueError(f"k must be in [1, {len(run.gallery_labels)}]")
    mated = run.mated
    if not mated.any():
        raise ValueError("no mated probes")
    r = true_ranks(run)[mated]
    return float(np.mean(r <= k))


def cmc_curve(run: IdentificationRun, ranks) -> list[tuple[int, float]]:
    return [(int(k), cmc(run, int(k))) for k in ranks if 1 <= k <= len(run.gallery_labels)]


def tpir_at_fpir(run: IdentificationRun, fpir: float) -> float:
    """Mated probes found at rank 1 with a top score above the impostor threshold.

    The threshold uses each non-mated probe's best score. Without non-mated probes
    nothing is rejected and the result equals rank-1.
    """
    if not 0.0 < fpir < 1.0:
        raise ValueError("fpir must be in (0, 1)")
    mated = run.mated
    if not mated.any():
        raise ValueError("no mated probes")
    top = run.scores.max(axis=1)
    impostor_top = top[~mated]
    t = _threshold_for_rate(impostor_top, fpir) if len(impostor_top) else -np.inf
    ranks = true_ranks(run)
    hit = (ranks == 1) & (top >= t)
    return float(np.mean(hit[mated]))


def closed_set_accuracy(head, aggregated, labels) -> float:
    x = np.atleast_2d(np.asarray(aggregated, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= head.num_classes):
        raise ValueError("label outside the head's output range")
    logits = nncore.forward(head.net, x)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


TRACE_FIELDS = ["set_id", "item_index", "duplicate_of", "quality_sigma", "weight"]


def weight_trace_rows(set_ids, weights_per_set, fsets) -> list[dict]:
    rows = []
    for sid, w, fs in zip(set_ids, weights_per_set, fsets):
        for i in range(len(w)):
            rows.append({
                "set_id": int(sid),
                "item_index": i,
                "duplicate_of": int(fs.duplicate_of[i]),
                "quality_sigma": float(fs.quality[i]),
                "weight": float(w[i]),
            })
    return rows


def export_weight_traces(agent_params, sets, head, path=None, mode: str = "mode") -> list[dict]:
    """Final per-item weights of the agent on each set, optionally written as CSV."""
    from .agent import rollout

    weights = []
    for fs in sets:
        _, st = rollout(agent_params, fs.embeddings, fs.identity, head, None, mode=mode)
        weights.append(st.weights)
    rows = weight_trace_rows([fs.set_id for fs in sets], weights, sets)
    if path is not None:
        write_csv(path, TRACE_FIELDS, rows)
    return rows


def write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([r[f] for f in fields] if isinstance(r, dict) else list(r))


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
