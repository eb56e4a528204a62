import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from setpool import agent as A
from setpool import env as E
from setpool import evaluation as V
from setpool import nncore as N
from setpool.env import RewardHead
from setpool.evaluation import IdentificationRun, ScoredPairs
from setpool.synth import GenConfig, generate


def sweep_tar(scores, genuine, far):
    """Exhaustive sweep: the smallest candidate threshold whose impostor acceptance is <= far."""
    scores, genuine = np.asarray(scores, float), np.asarray(genuine, bool)
    cands = sorted(set(scores.tolist()) | {np.inf})
    for t in cands:
        if np.mean(scores[~genuine] >= t) <= far + 1e-12:
            return float(np.mean(scores[genuine] >= t))
    return 0.0


def test_separable_scores_give_full_tar():
    pairs = ScoredPairs([0.9, 0.8, 0.95, 0.1, 0.2, 0.3], [1, 1, 1, 0, 0, 0])
    for far in (0.01, 0.1, 0.5):
        assert V.tar_at_far(pairs, far) == 1.0


def test_identical_distributions_follow_chance_line():
    s = np.arange(1000, dtype=float)
    pairs = ScoredPairs(np.concatenate([s, s]), np.r_[np.ones(1000), np.zeros(1000)])
    for far in (0.01, 0.1, 0.3):
        assert V.tar_at_far(pairs, far) == pytest.approx(far, abs=1e-3)


def test_six_pair_hand_example():
    scores = [0.9, 0.7, 0.4, 0.8, 0.5, 0.2]
    genuine = [1, 1, 1, 0, 0, 0]
    # one impostor in three may pass: threshold just above 0.5 keeps 0.8 only -> TAR 2/3
    assert V.tar_at_far(ScoredPairs(scores, genuine), 1 / 3) == pytest.approx(2 / 3)
    assert sweep_tar(scores, genuine, 1 / 3) == pytest.approx(2 / 3)


@settings(max_examples=80)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
def test_tar_matches_exhaustive_sweep(seed, far):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    scores = np.round(rng.standard_normal(n), 1)  # rounding forces ties
    genuine = rng.uniform(size=n) < 0.5
    genuine[0], genuine[1] = True, False
    assert V.tar_at_far(ScoredPairs(scores, genuine), far) == pytest.approx(sweep_tar(scores, genuine, far))


def test_roc_is_monotone():
    rng = np.random.default_rng(0)
    pairs = ScoredPairs(rng.standard_normal(50), rng.uniform(size=50) < 0.4)
    rows = V.roc_curve(pairs)
    fars, tars = [r[1] for r in rows], [r[2] for r in rows]
    assert fars == sorted(fars) and tars == sorted(tars)


def test_pair_validation():
    with pytest.raises(ValueError):
        ScoredPairs([], [])
    with pytest.raises(ValueError):
        ScoredPairs([np.nan], [True])
    with pytest.raises(ValueError):
        V.tar_at_far(ScoredPairs([1.0, 0.0], [1, 1]), 0.1)


def test_cmc_examples():
    assert V.cmc(IdentificationRun([[0.3]], [7], [7]), 1) == 1.0
    scores = np.array([[0.5, 0.9, 0.1, 0.2, 0.3]] * 3)
    run = IdentificationRun(scores, [1, 2, 3, 4, 5], [1, 1, 1])
    assert V.cmc(run, 1) == 0.0 and V.cmc(run, 2) == 1.0


def test_ties_break_by_gallery_index():
    run = IdentificationRun([[0.5, 0.5]], [1, 2], [2])
    assert V.true_ranks(run)[0] == 2


def brute_rank(scores, g_labels, label):
    order = sorted(range(len(g_labels)), key=lambda j: (-scores[j], j))
    for r, j in enumerate(order, 1):
        if g_labels[j] == label:
            return r
    return 0


def brute_tpir(scores, g_labels, p_labels, fpir):
    top = scores.max(axis=1)
    mated = np.isin(p_labels, g_labels)
    imp = top[~mated]
    cands = sorted(set(top.tolist()) | {np.inf, -np.inf})
    t = next(c for c in cands if len(imp) == 0 or np.mean(imp >= c) <= fpir + 1e-12)
    hits = [brute_rank(scores[i], g_labels, p_labels[i]) == 1 and top[i] >= t for i in np.flatnonzero(mated)]
    return float(np.mean(hits))


@pytest.mark.parametrize("seed", range(5))
def test_identification_metrics_match_enumeration(seed):
    rng = np.random.default_rng(seed)
    g_labels = np.arange(6)
    p_labels = rng.integers(0, 9, 20)  # labels 6-8 are non-mated
    p_labels[:2] = [0, 7]
    scores = np.round(rng.standard_normal((20, 6)), 1)
    scores[np.arange(20), np.minimum(p_labels, 5)] += 1.0
    run = IdentificationRun(scores, g_labels, p_labels, open_set=True)
    mated = np.isin(p_labels, g_labels)
    ranks = np.array([brute_rank(scores[i], g_labels, p_labels[i]) for i in range(20)])
    for k in range(1, 7):
        assert V.cmc(run, k) == pytest.approx(np.mean(ranks[mated] <= k))
    for fpir in (0.01, 0.2, 0.5):
        assert V.tpir_at_fpir(run, fpir) == pytest.approx(brute_tpir(scores, g_labels, p_labels, fpir))


def test_closed_set_tpir_equals_rank1():
    rng = np.random.default_rng(0)
    run = IdentificationRun(rng.standard_normal((10, 4)), np.arange(4), rng.integers(0, 4, 10))
    assert V.tpir_at_fpir(run, 0.1) == V.cmc(run, 1)


def test_identification_validation():
    with pytest.raises(ValueError):
        IdentificationRun(np.zeros((2, 3)), [1, 2, 3], [1])
    run = IdentificationRun(np.zeros((1, 2)), [1, 2], [1])
    with pytest.raises(ValueError):
        V.cmc(run, 3)
    with pytest.raises(ValueError):
        V.cmc(IdentificationRun(np.zeros((1, 2)), [1, 2], [5]), 1)


def test_accuracy_examples():
    head = RewardHead(N.DenseNet([N.Layer(np.eye(3), np.zeros(3), "identity")]), 0.1)
    assert V.closed_set_accuracy(head, np.eye(3), [0, 1, 2]) == 1.0
    rows = np.array([[0.1, 0.5, 0.2], [2, 1, 0], [0, 0, 3], [1, 1.5, 1], [-1, -2, -3],
                     [0, 4, 1], [3, 2, 2.5], [0.2, 0.1, 0.3], [5, 6, 7], [1, 0, 0]])
    labels = [1, 0, 0, 1, 0, 2, 0, 1, 2, 1]
    manual = sum(int(np.argmax(r) == y) for r, y in zip(rows, labels)) / 10
    assert V.closed_set_accuracy(head, rows, labels) == manual == 0.6
    with pytest.raises(ValueError):
        V.closed_set_accuracy(head, rows[:1], [3])


def test_random_head_is_at_chance():
    rng = np.random.default_rng(0)
    head = E.make_reward_head(8, 10, rng, hidden=16)
    x = rng.standard_normal((1000, 8))
    y = np.repeat(np.arange(10), 100)
    assert V.closed_set_accuracy(head, x, y) == pytest.approx(0.1, abs=0.05)


def test_weight_traces_for_symmetric_policy(tmp_path):
    col = generate(GenConfig(num_identities=3, embed_dim=4, sets_per_identity=2, set_size_range=(2, 5),
                             redundancy_rate=0.4, seed=1))
    sets = col.sets("train")
    p = A.init_agent(4, np.random.default_rng(0))
    zero = A.AgentParams(N.zeros_like_net(p.trunk), N.zeros_like_net(p.policy), N.zeros_like_net(p.value), 0.999)
    head = E.make_reward_head(4, 3, np.random.default_rng(0))
    rows = V.export_weight_traces(zero, sets, head, tmp_path / "w.csv")
    assert len(rows) == sum(len(fs) for fs in sets)
    assert all(r["weight"] == 0.5 for r in rows)
    with open(tmp_path / "w.csv") as fh:
        read = list(csv.DictReader(fh))
    assert list(read[0]) == V.TRACE_FIELDS and len(read) == len(rows)
