"""Command-line driver: ``setpool {gen,train,eval,inspect}``.

Exit codes: 0 success, 1 configuration error, 2 data or format error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from . import pipeline as pl
from . import training as tr
from .config import ExperimentConfig, load_config, load_gen_config
from .env import DegenerateWeightsError
from .nncore import ShapeError
from .synth import ConfigError, FeatureSetCollection, FormatError, generate, read_features, write_features

log = logging.getLogger("setpool")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

PROTOCOL_NAMES = {"verify": "verification", "closed-id": "closed_id", "open-id": "open_id"}
PGR_NAMES = {"none": "none", "pf": "parameter_free", "ml": "metric_learning"}


def _with_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is None:
        return cfg
    cfg = dataclasses.replace(cfg, seed=seed)
    if cfg.dataset.generate is not None:
        cfg.dataset = dataclasses.replace(cfg.dataset, generate=dataclasses.replace(cfg.dataset.generate, seed=seed))
    return cfg


def _load_data(path, cfg: ExperimentConfig | None) -> FeatureSetCollection:
    if path is not None:
        return read_features(path)
    if cfg is not None and cfg.dataset.path is not None:
        return read_features(cfg.dataset.path)
    if cfg is not None and cfg.dataset.generate is not None:
        return generate(cfg.dataset.generate)
    raise ConfigError("no data: pass --data or configure a dataset")


def cmd_gen(args) -> int:
    gen = load_gen_config(args.config)
    if args.seed is not None:
        gen = dataclasses.replace(gen, seed=args.seed)
    col = generate(gen)
    write_features(col, args.out)
    print(f"wrote {len(col)} records in {len(col.sets())} sets to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.checkpoint:
        model = tr.load_model(args.checkpoint)
        if args.config:
            log.warning("--config ignored when resuming; the checkpoint's config is used")
        cfg = model.config
    else:
        if not args.config:
            raise ConfigError("train needs --config (or --checkpoint to resume)")
        cfg = _with_seed(load_config(args.config), args.seed)
        model = None
    col = _load_data(args.data, cfg)
    train_sets = col.sets("train")
    if not train_sets:
        raise FormatError("data contains no training sets", 0)
    if model is None:
        model = tr.init_model(cfg, train_sets)
    elif train_sets[0].embeddings.shape[1] != model.embed_dim:
        raise ShapeError(f"data dim {train_sets[0].embeddings.shape[1]} != model dim {model.embed_dim}")

    if args.phase == "rl":
        episodes = cfg.training.episodes if args.episodes is None else args.episodes
        metrics = args.metrics or str(Path(args.out).with_suffix(".metrics.csv"))
        rows = tr.train_rl(model, train_sets, episodes, metrics_path=metrics)
        if rows:
            tail = rows[-min(100, len(rows)):]
            print(f"episodes {model.episode}; mean reward over last {len(tail)}: "
                  f"{sum(r['reward'] for r in tail) / len(tail):.4f}")
    elif args.phase == "temporal":
        losses = tr.train_temporal_phase(model, train_sets, args.episodes)
        if losses:
            print(f"temporal steps {len(losses)}; final loss {losses[-1]:.4f}")
    else:
        losses = tr.train_mlpgr_phase(model, train_sets, args.episodes)
        if losses:
            print(f"pose projection steps {len(losses)}; final loss {losses[-1]:.4f}")
    tr.save_model(model, args.out)
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = tr.load_model(args.checkpoint)
    cfg = model.config
    col = _load_data(args.data, cfg)
    if col.embed_dim != model.embed_dim:
        raise ShapeError(f"data dim {col.embed_dim} != model dim {model.embed_dim}")
    protocol = PROTOCOL_NAMES[args.protocol] if args.protocol else cfg.eval.protocol
    pgr_mode = PGR_NAMES[args.pgr] if args.pgr else cfg.pgr.mode
    threshold = cfg.termination_threshold
    if args.termination is not None:
        threshold = args.termination if args.termination > 0 else None
    if protocol == "open_id" and threshold is not None:
        raise ConfigError("softmax termination cannot be used for open-set identification")
    seed = cfg.seed if args.seed is None else args.seed
    result = pl.evaluate(model, col, protocol, args.baseline, pgr_mode, threshold=threshold, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ev.write_summary(out / "summary.json", result.summary)
    for name, (fields, rows) in result.curves.items():
        ev.write_csv(out / f"{name}.csv", fields, rows)
    ev.write_csv(out / "weights.csv", ev.TRACE_FIELDS, pl.weight_trace_rows(result.probes + result.gallery))
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = tr.load_model(args.checkpoint)
    counts = model.param_counts()
    info = {
        "episode": model.episode,
        "phases": model.phases,
        "embed_dim": model.embed_dim,
        "num_classes": len(model.classes),
        "parameters": counts,
        "total_parameters": sum(counts.values()),
        "replay_pool": len(model.pool),
        "lr_policy": model.lr_policy,
        "lr_value": model.lr_value,
        "config": tr.model_to_checkpoint(model)[0]["config"],
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="setpool", description="Set aggregation with a learned weighting agent.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic feature file")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run a training phase and write a checkpoint")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--phase", choices=["rl", "temporal", "mlpgr"], default="rl")
    t.add_argument("--episodes", type=int, help="episodes (rl) or steps (temporal, mlpgr); overrides the config")
    t.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--seed", type=int)
    e.add_argument("--protocol", choices=sorted(PROTOCOL_NAMES))
    e.add_argument("--baseline", choices=list(pl.BASELINES), default="dac")
    e.add_argument("--pgr", choices=sorted(PGR_NAMES))
    e.add_argument("--termination", type=float,
                   help="softmax termination threshold for probes (0 disables); overrides the config")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="summarize a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except tr.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, ShapeError, DegenerateWeightsError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
