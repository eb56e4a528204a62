"""Model state and the staged training loops (reward head, agent, temporal net, pose projection)."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import env as envmod
from . import nncore
from . import offpolicy as off
from . import pgr as pgrmod
from . import temporal as tmp
from .agent import AgentOptimizer, AgentParams, Trajectory, a2c_gradients, init_agent, rollout, sample_learning_rate, td_errors
from .config import ExperimentConfig, config_from_dict, config_to_dict
from .nncore import DenseNet, Layer
from .synth import FeatureSet, FormatError

log = logging.getLogger(__name__)

METRIC_FIELDS = ["episode", "reward", "mean_abs_td", "mean_kl"]


class NumericError(RuntimeError):
    """Raised when a non-finite value appears during training."""


@dataclass
class Model:
    config: ExperimentConfig
    classes: np.ndarray  # identity of each head output, ascending
    agent: AgentParams
    average: off.AveragePolicy
    head: envmod.RewardHead
    temporal: tmp.TempConvNet
    projection: DenseNet
    agent_opt: AgentOptimizer
    temporal_opt: nncore.Adam
    projection_opt: nncore.Adam
    pool: off.ReplayPool
    rng: np.random.Generator
    lr_policy: float
    lr_value: float
    episode: int = 0
    phases: list[str] = field(default_factory=list)

    @property
    def embed_dim(self) -> int:
        return self.head.net.input_dim

    def class_index(self, identity: int) -> int:
        i = int(np.searchsorted(self.classes, identity))
        if i >= len(self.classes) or self.classes[i] != identity:
            raise KeyError(f"identity {identity} is not a training class")
        return i

    def trust_region(self) -> off.TrustRegionConfig:
        c = self.config.offpolicy
        return off.TrustRegionConfig(xi=c.xi, alpha=c.alpha, c=c.c, capacity=c.capacity, batch_size=c.batch_size)

    def param_counts(self) -> dict[str, int]:
        return {
            "agent": self.agent.num_params(),
            "head": self.head.net.num_params(),
            "temporal": self.temporal.num_params(),
            "projection": self.projection.num_params(),
        }


def warmup_head(head: envmod.RewardHead, sets: list[FeatureSet], labels: np.ndarray, steps: int, lr: float) -> envmod.RewardHead:
    """Full-batch Adam on individual training items, so the head scores single features sensibly."""
    if steps == 0:
        return head
    xs = np.concatenate([s.embeddings for s in sets])
    ys = np.concatenate([np.full(len(s), lab) for s, lab in zip(sets, labels)])
    opt = nncore.Adam([a.shape for a in head.net.arrays()])
    for _ in range(steps):
        _, g = envmod.head_loss_and_grad(head, xs, ys)
        head = envmod.RewardHead(head.net.with_arrays(opt.step(head.net.arrays(), g.arrays(), lr)), head.lam)
    return head


def init_model(config: ExperimentConfig, train_sets: list[FeatureSet]) -> Model:
    """Fresh model for ``config``; the reward head is warmed up on the training items."""
    if not train_sets:
        raise ValueError("no training sets")
    d = train_sets[0].embeddings.shape[1]
    classes = np.unique([s.identity for s in train_sets])
    rng = np.random.default_rng(config.seed)
    lr_p = sample_learning_rate(rng, config.agent.lr_min, config.agent.lr_max)
    lr_v = sample_learning_rate(rng, config.agent.lr_min, config.agent.lr_max)
    head = envmod.make_reward_head(d, len(classes), rng, lam=config.agent.lam, hidden=config.agent.head_hidden)
    labels = np.searchsorted(classes, [s.identity for s in train_sets])
    head = warmup_head(head, train_sets, labels, config.training.head_warmup_steps, config.training.head_warmup_lr)
    agent = init_agent(d, rng, config.agent.gamma)
    temporal = tmp.init_tempconv(d, rng)
    projection = pgrmod.identity_projection(d)
    return Model(
        config=config, classes=classes, agent=agent, average=off.AveragePolicy.from_agent(agent), head=head,
        temporal=temporal, projection=projection, agent_opt=AgentOptimizer(agent),
        temporal_opt=nncore.Adam([a.shape for a in temporal.arrays()]),
        projection_opt=nncore.Adam([a.shape for a in projection.arrays()]),
        pool=off.ReplayPool(config.offpolicy.capacity), rng=rng, lr_policy=lr_p, lr_value=lr_v,
    )


def _record_phase(model: Model, phase: str) -> None:
    # a resumed phase continues the previous entry, so split runs log like straight ones
    if not model.phases or model.phases[-1] != phase:
        model.phases.append(phase)


def _check_finite(where: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite value in {where}")


def _fmt(v: float) -> str:
    return repr(float(v))


def episode_units(model: Model, fset: FeatureSet, use_temporal: bool | None = None):
    """Decision items of a set: the raw items, or stills plus one attention-pooled item per segment.

    Returns (units, partition, temporal weights); the last two are None without segments.
    """
    if use_temporal is None:
        use_temporal = model.config.temporal.enabled
    if use_temporal:
        partition = tmp.partition_set(fset)
        if partition.segments:
            f = fset.embeddings
            tw = [tmp.temporal_attention(model.temporal, f[idx]) for _, idx in partition.segments]
            return tmp.collapse_segments(partition, tw, f), partition, tw
    return fset.embeddings, None, None


def rl_episode(model: Model, train_sets: list[FeatureSet]) -> dict:
    """One episode: rollout, store, reward-head step, agent step. Mutates ``model``."""
    cfg = model.config
    fs = train_sets[int(model.rng.integers(len(train_sets)))]
    label = model.class_index(fs.identity)
    units, _, _ = episode_units(model, fs)
    traj, state = rollout(model.agent, units, label, model.head, model.rng,
                          threshold=cfg.termination_threshold)
    _check_finite("episode rewards", traj.rewards)
    mean_abs_td = float(np.mean(np.abs(td_errors(model.agent, traj))))
    if cfg.training.algorithm == "off":
        model.pool.add(traj)

    agg = envmod.floored_aggregate(state.features, state.weights)
    model.head = envmod.train_reward_head(model.head, agg[None, :], [label], cfg.training.head_lr)

    mean_kl = 0.0
    if cfg.training.algorithm == "on":
        grads, _ = a2c_gradients(model.agent, traj)
        model.agent = model.agent_opt.step(model.agent, grads, model.lr_policy, model.lr_value)
    else:
        tr = model.trust_region()
        kls = []
        for _ in range(cfg.training.replay_steps):
            model.agent, model.average, diag = off.replay_train_step(
                model.agent, model.average, model.pool, tr, model.lr_policy, model.lr_value, model.rng,
                optimizer=model.agent_opt)
            kls.append(diag["mean_kl"])
        mean_kl = float(np.mean(kls)) if kls else 0.0
    _check_finite("agent parameters", *model.agent.trunk.arrays(), *model.agent.policy.arrays())
    model.episode += 1
    return {"episode": model.episode, "reward": float(traj.rewards.sum()), "mean_abs_td": mean_abs_td, "mean_kl": mean_kl}


def train_rl(model: Model, train_sets: list[FeatureSet], episodes: int, metrics_path=None, callback=None) -> list[dict]:
    """Run ``episodes`` agent episodes. Metrics rows are appended to ``metrics_path`` and flushed per episode."""
    rows = []
    fh = writer = None
    if metrics_path is not None:
        fh = open(metrics_path, "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fh.tell() == 0:
            writer.writerow(METRIC_FIELDS)
            fh.flush()
    try:
        for _ in range(episodes):
            row = rl_episode(model, train_sets)
            rows.append(row)
            if writer is not None:
                writer.writerow([row["episode"]] + [_fmt(row[k]) for k in METRIC_FIELDS[1:]])
                fh.flush()
            if callback is not None:
                callback(row)
    finally:
        if fh is not None:
            fh.close()
    if episodes:
        _record_phase(model, "rl")
    return rows


def segment_episodes(model: Model, sets: list[FeatureSet]) -> list[tuple[np.ndarray, int]]:
    out = []
    for fs in sets:
        label = model.class_index(fs.identity)
        for _, idx in sorted(fs.segments().items()):
            out.append((fs.embeddings[idx], label))
    return out


def train_temporal_phase(model: Model, train_sets: list[FeatureSet], steps: int | None = None) -> list[float]:
    """Train the temporal attention net on video segments with the reward head frozen."""
    cfg = model.config.training
    steps = cfg.temporal_steps if steps is None else steps
    episodes = segment_episodes(model, train_sets)
    if not episodes:
        raise FormatError("training data contains no video segments", 0)
    losses = []
    for _ in range(steps):
        idx = model.rng.integers(len(episodes), size=min(cfg.temporal_batch, len(episodes)))
        batch = [episodes[i] for i in idx]
        loss, grads = tmp.temporal_batch_grad(model.temporal, batch, model.head)
        _check_finite("temporal loss", np.array([loss]), *grads)
        model.temporal = model.temporal.with_arrays(model.temporal_opt.step(model.temporal.arrays(), grads, cfg.temporal_lr))
        losses.append(loss)
    if steps:
        _record_phase(model, "temporal")
    return losses


def sample_pairs(model: Model, sets: list[FeatureSet], n: int) -> list[pgrmod.SetPair]:
    """Half genuine, half impostor set pairs drawn with ``model.rng``."""
    by_id: dict[int, list[int]] = {}
    for i, fs in enumerate(sets):
        by_id.setdefault(fs.identity, []).append(i)
    pairs = []
    for _ in range(n):
        a = sets[int(model.rng.integers(len(sets)))]
        same = bool(model.rng.random() < 0.5)
        pool = [i for i in by_id[a.identity] if sets[i].set_id != a.set_id] if same else \
            [i for i, fs in enumerate(sets) if fs.identity != a.identity]
        if not pool:
            pool = [i for i in range(len(sets)) if sets[i].set_id != a.set_id] or [0]
        b = sets[pool[int(model.rng.integers(len(pool)))]]
        pairs.append(pgrmod.SetPair(a.embeddings, a.yaw, model.class_index(a.identity),
                                    b.embeddings, b.yaw, model.class_index(b.identity)))
    return pairs


def train_mlpgr_phase(model: Model, train_sets: list[FeatureSet], steps: int | None = None) -> list[float]:
    """Train the linear pose projection on the cross-entropy plus pose-group margin objective."""
    cfg = model.config.training
    steps = cfg.mlpgr_steps if steps is None else steps
    th = pgrmod.MLPGRThresholds(beta=model.config.pgr.beta, phi=model.config.pgr.phi)
    losses = []
    for _ in range(steps):
        pairs = sample_pairs(model, train_sets, cfg.mlpgr_batch)
        loss, grads = pgrmod.ml_pgr_objective_and_grad(model.projection, pairs, model.head, th)
        _check_finite("pose projection loss", np.array([loss]), *grads.arrays())
        model.projection = model.projection.with_arrays(
            model.projection_opt.step(model.projection.arrays(), grads.arrays(), cfg.mlpgr_lr))
        losses.append(loss)
    if steps:
        _record_phase(model, "mlpgr")
    return losses


# --- checkpoint conversion -------------------------------------------------

def _net_arrays(prefix: str, net: DenseNet, out: dict) -> list[str]:
    for i, layer in enumerate(net.layers):
        out[f"{prefix}.{i}.w"] = layer.weight
        out[f"{prefix}.{i}.b"] = layer.bias
    return list(net.activations)


def _net_from(prefix: str, acts: list[str], arrays: dict) -> DenseNet:
    return DenseNet([Layer(arrays[f"{prefix}.{i}.w"], arrays[f"{prefix}.{i}.b"], a) for i, a in enumerate(acts)])


def _list_arrays(prefix: str, arrs, out: dict) -> int:
    for i, a in enumerate(arrs):
        out[f"{prefix}.{i}"] = np.asarray(a, dtype=np.float64)
    return len(arrs)


def _list_from(prefix: str, n: int, arrays: dict) -> list[np.ndarray]:
    return [arrays[f"{prefix}.{i}"] for i in range(n)]


def model_to_checkpoint(model: Model) -> tuple[dict, dict[str, np.ndarray]]:
    arrays: dict[str, np.ndarray] = {"classes": model.classes.astype(np.float64)}
    nets = {
        "agent.trunk": _net_arrays("agent.trunk", model.agent.trunk, arrays),
        "agent.policy": _net_arrays("agent.policy", model.agent.policy, arrays),
        "agent.value": _net_arrays("agent.value", model.agent.value, arrays),
        "average.trunk": _net_arrays("average.trunk", model.average.trunk, arrays),
        "average.policy": _net_arrays("average.policy", model.average.policy, arrays),
        "head": _net_arrays("head", model.head.net, arrays),
        "projection": _net_arrays("projection", model.projection, arrays),
    }
    _list_arrays("temporal", model.temporal.arrays(), arrays)
    counts = {
        "agent_opt": _list_arrays("opt.agent", model.agent_opt.state_arrays(), arrays),
        "temporal_opt": _list_arrays("opt.temporal", model.temporal_opt.state_arrays(), arrays),
        "projection_opt": _list_arrays("opt.projection", model.projection_opt.state_arrays(), arrays),
    }
    pool = model.pool.items()
    for i, t in enumerate(pool):
        for name in ("states", "actions", "log_probs", "rewards", "next_states", "dones"):
            arrays[f"pool.{i}.{name}"] = np.asarray(getattr(t, name), dtype=np.float64)
    meta = {
        "config": config_to_dict(model.config),
        "nets": nets,
        "counts": counts,
        "pool_size": len(pool),
        "episode": model.episode,
        "phases": list(model.phases),
        "lr_policy": model.lr_policy,
        "lr_value": model.lr_value,
        "lam": model.head.lam,
        "gamma": model.agent.gamma,
        "rng": model.rng.bit_generator.state,
    }
    return meta, arrays


def model_from_checkpoint(meta: dict, arrays: dict[str, np.ndarray]) -> Model:
    try:
        config = config_from_dict(meta["config"])
        nets = {k: _net_from(k, acts, arrays) for k, acts in meta["nets"].items()}
        agent = AgentParams(nets["agent.trunk"], nets["agent.policy"], nets["agent.value"], meta["gamma"])
        temporal = tmp.TempConvNet(*_list_from("temporal", 4, arrays))
        agent_opt = AgentOptimizer(agent)
        agent_opt.load_state_arrays(_list_from("opt.agent", meta["counts"]["agent_opt"], arrays))
        temporal_opt = nncore.Adam([a.shape for a in temporal.arrays()])
        temporal_opt.load_state_arrays(_list_from("opt.temporal", meta["counts"]["temporal_opt"], arrays))
        projection_opt = nncore.Adam([a.shape for a in nets["projection"].arrays()])
        projection_opt.load_state_arrays(_list_from("opt.projection", meta["counts"]["projection_opt"], arrays))
        pool = off.ReplayPool(config.offpolicy.capacity)
        for i in range(meta["pool_size"]):
            g = {name: arrays[f"pool.{i}.{name}"] for name in ("states", "actions", "log_probs", "rewards", "next_states", "dones")}
            g["dones"] = g["dones"].astype(bool)
            pool.add(Trajectory(**g))
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        return Model(
            config=config, classes=arrays["classes"].astype(np.int64), agent=agent,
            average=off.AveragePolicy(nets["average.trunk"], nets["average.policy"]),
            head=envmod.RewardHead(nets["head"], meta["lam"]), temporal=temporal, projection=nets["projection"],
            agent_opt=agent_opt, temporal_opt=temporal_opt, projection_opt=projection_opt, pool=pool, rng=rng,
            lr_policy=meta["lr_policy"], lr_value=meta["lr_value"], episode=meta["episode"], phases=list(meta["phases"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"checkpoint content is inconsistent: {exc}", 0) from exc


def save_model(model: Model, path) -> None:
    ckpt.save(path, *model_to_checkpoint(model))


def load_model(path) -> Model:
    return model_from_checkpoint(*ckpt.load(path))


def moving_average(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([])
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def episodes_to_reach(values, threshold: float, window: int = 100) -> float:
    """First episode (1-based) at which the trailing moving average reaches ``threshold``; inf if never."""
    ma = moving_average(values, window)
    hit = np.flatnonzero(ma >= threshold)
    return float(hit[0] + window) if len(hit) else math.inf
