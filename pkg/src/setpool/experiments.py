"""Experiment runners shared by the acceptance tests and the scripts in ``scripts/``.

Every runner takes a seed and returns plain numbers, so results can be
aggregated over seeds and printed or asserted on.
"""
from __future__ import annotations

import dataclasses
import math
import time

import numpy as np

from . import env as envmod
from . import nncore
from . import pipeline as pl
from . import temporal as tmp
from . import training as tr
from .config import DatasetConfig, ExperimentConfig, PGRConfig, TrainingConfig
from .synth import GenConfig, generate


def benchmark_gen_config(seed: int, **overrides) -> GenConfig:
    """The redundancy benchmark: 50 identities, 30% near-duplicates, heavy per-item noise."""
    base = dict(
        num_identities=50, embed_dim=128, sets_per_identity=20, set_size_range=(2, 10),
        quality_noise_range=(0.5, 6.0), redundancy_rate=0.3, pose_offset_scale=0.3,
        probe_sets_per_identity=6, gallery_sets_per_identity=1, seed=seed,
    )
    base.update(overrides)
    return GenConfig(**base)


def experiment_config(gen: GenConfig, seed: int, algorithm: str = "on", episodes: int = 2000, **training) -> ExperimentConfig:
    cfg = ExperimentConfig(
        seed=seed, dataset=DatasetConfig(generate=gen),
        training=TrainingConfig(algorithm=algorithm, episodes=episodes, **training),
    )
    cfg.validate()
    return cfg


def train_on_benchmark(gen: GenConfig, seed: int, algorithm: str = "on", episodes: int = 2000, **training):
    cfg = experiment_config(gen, seed, algorithm, episodes, **training)
    col = generate(gen)
    train_sets = col.sets("train")
    model = tr.init_model(cfg, train_sets)
    rows = tr.train_rl(model, train_sets, episodes)
    return model, col, rows


def duplicate_weight_ratio(aggs: list[pl.Aggregated]) -> tuple[float, float]:
    """Mean final weight of duplicate items and of their source items."""
    dup, src = [], []
    for a in aggs:
        for i, s in enumerate(a.fset.duplicate_of):
            if s >= 0:
                dup.append(a.weights[i])
                src.append(a.weights[s])
    return float(np.mean(dup)), float(np.mean(src))


def redundancy_run(seed: int, episodes: int = 2000, algorithm: str = "on", threshold: float = 0.5) -> dict:
    """Train once and measure pooling baselines, binary actions and softmax termination."""
    t0 = time.time()
    model, col, rows = train_on_benchmark(benchmark_gen_config(seed), seed, algorithm, episodes)
    out: dict = {"seed": seed}
    for name in ("meanpool", "maxpool", "dac", "dac-binary"):
        res = pl.evaluate(model, col, "closed_id", name)
        out[f"{name}_rank1"] = res.summary["rank1"]
        out[f"{name}_head_acc"] = res.summary["head_accuracy"]
        if name == "dac":
            out["dup_weight"], out["src_weight"] = duplicate_weight_ratio(res.probes)
            out["full_traversed"] = res.summary["mean_traversed"]
    term = pl.evaluate(model, col, "closed_id", "dac", threshold=threshold)
    out["term_rank1"] = term.summary["rank1"]
    out["term_head_acc"] = term.summary["head_accuracy"]
    out["term_traversed"] = term.summary["mean_traversed"]
    rewards = [r["reward"] for r in rows]
    ma = tr.moving_average(rewards)
    out["ma_first"] = float(ma[0]) if len(ma) else math.nan
    out["ma_last"] = float(ma[-1]) if len(ma) else math.nan
    out["seconds"] = time.time() - t0
    return out


def sample_efficiency_run(seed: int, episodes: int = 2000, window: int = 100) -> dict:
    """Episode rewards of on- and off-policy training from the same initial model."""
    gen = benchmark_gen_config(seed)
    col = generate(gen)
    train_sets = col.sets("train")
    curves = {}
    for algo in ("on", "off"):
        model = tr.init_model(experiment_config(gen, seed, algo, episodes), train_sets)
        curves[algo] = [r["reward"] for r in tr.train_rl(model, train_sets, episodes)]
    converged = float(np.mean(curves["on"][-window:]))
    threshold = 0.9 * converged
    on_ep = tr.episodes_to_reach(curves["on"], threshold, window)
    off_ep = tr.episodes_to_reach(curves["off"], threshold, window)
    return {"seed": seed, "threshold": threshold, "on_episodes": on_ep, "off_episodes": off_ep,
            "ratio": off_ep / on_ep if math.isfinite(on_ep) else math.nan, "curves": curves}


def pgr_run(seed: int, episodes: int = 2000, pose_offset_scale: float = 0.4, mlpgr_steps: int = 200,
            normalize_masses: bool = False) -> dict:
    """Profile-only probes: plain DAC against DAC with parameter-free and metric-learning PGR."""
    gen = benchmark_gen_config(seed, pose_offset_scale=pose_offset_scale, probe_pose="profile")
    cfg = experiment_config(gen, seed, "on", episodes, mlpgr_steps=mlpgr_steps)
    cfg.pgr = PGRConfig(normalize_masses=normalize_masses)
    col = generate(gen)
    train_sets = col.sets("train")
    model = tr.init_model(cfg, train_sets)
    tr.train_mlpgr_phase(model, train_sets)
    tr.train_rl(model, train_sets, episodes)
    out: dict = {"seed": seed}
    for mode in ("none", "parameter_free", "metric_learning"):
        out[mode] = pl.evaluate(model, col, "closed_id", "dac", pgr_mode=mode).summary["rank1"]
    return out


def pf_distance_calls(model: tr.Model, col, n_pairs: int = 10) -> list[int]:
    """Number of distance evaluations spent by the parameter-free PGR distance on a few pairs."""
    probes = pl.aggregate_all(model, col.sets("probe")[:n_pairs], "dac")
    gallery = pl.aggregate_all(model, col.sets("gallery")[:n_pairs], "dac")
    scorer = pl.Scorer(model, "parameter_free", col.pose_direction)
    counts = []
    for p, g in zip(probes, gallery):
        c = pl.CountingDistance()
        scorer.distance(p, g, dist=c)
        counts.append(c.calls)
    return counts


def attention_shift_run(seed: int, steps: int = 1000, dim: int = 32, classes: int = 10, length: int = 5,
                        clean_sigma: float = 0.1, noisy_sigma: float = 3.0, lr: float = 1e-3, batch: int = 8) -> dict:
    """Segments with one clean frame among noisy ones: does training move attention to the clean frame?"""
    rng = np.random.default_rng(seed)
    centroids = rng.standard_normal((classes, dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    scale = 1.0 / np.sqrt(dim)

    def segment():
        y = int(rng.integers(classes))
        pos = int(rng.integers(length))
        sig = np.full(length, noisy_sigma)
        sig[pos] = clean_sigma
        frames = centroids[y] + sig[:, None] * scale * rng.standard_normal((length, dim))
        return frames, y, pos

    # reward head fitted on clean single features, then frozen
    head = envmod.make_reward_head(dim, classes, rng, lam=0.0, hidden=32)
    ys = np.repeat(np.arange(classes), 20)
    xs = centroids[ys] + clean_sigma * scale * rng.standard_normal((len(ys), dim))
    opt = nncore.Adam([a.shape for a in head.net.arrays()])
    for _ in range(200):
        _, g = envmod.head_loss_and_grad(head, xs, ys)
        head = envmod.RewardHead(head.net.with_arrays(opt.step(head.net.arrays(), g.arrays(), 1e-2)), 0.0)

    net = tmp.init_tempconv(dim, rng)
    topt = nncore.Adam([a.shape for a in net.arrays()])
    test = [segment() for _ in range(200)]

    def clean_share():
        return float(np.mean([tmp.temporal_attention(net, f)[p] for f, _, p in test]))

    before = clean_share()
    for _ in range(steps):
        eps = [segment()[:2] for _ in range(batch)]
        net = tmp.train_temporal(net, eps, head, lr, optimizer=topt)
    return {"seed": seed, "before": before, "after": clean_share(), "uniform": 1.0 / length}
