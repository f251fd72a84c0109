"""Command-line experiment driver: ``uavlos {gen,train,eval,fewshot,noise,position}``.

Every subcommand reads a YAML config (``--config``); ``--seed`` and ``--out``
override the config's seed and output location. Exit codes: 0 success,
2 configuration error, 3 data error, 4 non-convergence under ``--strict``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import dataset as D
from .channel import ChannelConfig
from .errors import ConfigError, UavLosError
from .experiments import (NOISE_GRID, config_hash, fewshot_sweep, median_by_k, noise_sweep, prepare,
                          run_positioning, write_csv, write_positioning)
from .model import (FINE_TUNE, Model, ModelConfig, TrainConfig, evaluate, fit, load_checkpoint,
                    save_checkpoint)
from .scene import ScenarioSpec, build_scenario
from .sensing import CameraSpec

log = logging.getLogger("uavlos")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONCONVERGED = 0, 2, 3, 4


class NonConvergence(UavLosError):
    pass


# ---------------------------------------------------------------------------
# config helpers

def _check_keys(cfg: dict, allowed: set[str], where: str) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _require(cfg: dict, key: str, where: str) -> Any:
    if key not in cfg or cfg[key] is None:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return cfg[key]


def _build(cls, values: dict | None, where: str, **extra):
    values = {**(values or {}), **extra}
    _check_keys(values, {f.name for f in fields(cls)}, where)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _train_config(values: dict | None, where: str, default: TrainConfig, seed: int | None) -> TrainConfig:
    merged = {**asdict(default), **(values or {})}
    if seed is not None:
        merged["seed"] = seed
    return _build(TrainConfig, merged, where)


def _model_config(values: dict | None, ds: D.Dataset) -> ModelConfig:
    side = int(ds.meta.get("image_side", 96))
    base = {"grid": ds.g, "input_side": side, "image_side": min(96, side)}
    return _build(ModelConfig, {**base, **(values or {})}, "model_config")


def _load_dataset(cfg: dict, key: str, route_key: str) -> tuple[D.Dataset, D.Split]:
    ds = D.load(_require(cfg, key, key))
    return prepare(ds, int(_require(cfg, route_key, route_key)))


def _out(cfg: dict, args) -> Path:
    return Path(args.out or _require(cfg, "out", "config"))


# ---------------------------------------------------------------------------
# commands

def cmd_gen(cfg: dict, args) -> int:
    _check_keys(cfg, {"scenario", "camera", "channel", "out", "altitude"}, "gen")
    scen = dict(cfg.get("scenario") or {})
    if args.seed is not None:
        scen["seed"] = args.seed
    spec = ScenarioSpec.from_dict(scen)
    cam = _build(CameraSpec, cfg.get("camera"), "camera")
    chan = _build(ChannelConfig, cfg.get("channel"), "channel")
    scenario = build_scenario(spec)
    ds = D.generate_dataset(scenario, cfg.get("altitude"), cam, chan, threads=args.threads)
    out = _out(cfg, args)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save(ds, out)
    print(f"wrote {out}: {len(ds)} samples, routes {ds.routes}, LoS fraction {ds.los_fraction():.4f}")
    return EXIT_OK


def cmd_train(cfg: dict, args) -> int:
    _check_keys(cfg, {"dataset", "test_route", "model", "model_config", "train", "resume", "out"},
                "train")
    ds, split = _load_dataset(cfg, "dataset", "test_route")
    tcfg = _train_config(cfg.get("train"), "train", TrainConfig(), args.seed)
    if cfg.get("resume"):
        model = load_checkpoint(cfg["resume"])
    else:
        kind = cfg.get("model", "fusion")
        model = Model.create(kind, _model_config(cfg.get("model_config"), ds), tcfg.seed)
    if not split.train_ids:
        raise ConfigError("test route leaves no training data")
    res = fit(model, ds.subset(split.train_ids), tcfg, ds.subset(split.test_ids),
              log=log.info)
    out = _out(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.snlm")
    write_csv(out / "history.csv", ("epoch", "train_loss", "test_accuracy"),
              ((r.epoch, r.train_loss, r.test_accuracy) for r in res.history), config_hash(cfg))
    last = res.history[-1] if res.history else None
    if last:
        print(f"{model.kind}: final train loss {last.train_loss:.4f}, "
              f"test accuracy {last.test_accuracy:.4f}")
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    _check_keys(cfg, {"dataset", "test_route", "checkpoint", "out"}, "eval")
    ds, split = _load_dataset(cfg, "dataset", "test_route")
    model = load_checkpoint(_require(cfg, "checkpoint", "eval"))
    res = evaluate(model, ds.subset(split.test_ids))
    out, h = _out(cfg, args), config_hash(cfg)
    c = res.confusion
    write_csv(out / "eval_summary.csv", ("accuracy", "tn", "fp", "fn", "tp", "cells"),
              [(res.accuracy, c[0, 0], c[0, 1], c[1, 0], c[1, 1], res.cells)], h)
    write_csv(out / "per_snapshot_accuracy.csv", ("route", "snapshot_index", "accuracy"),
              res.per_snapshot, h)
    print(f"accuracy {res.accuracy:.4f} over {res.cells} cells; confusion [[TN FP] [FN TP]] = "
          f"{c.tolist()}")
    return EXIT_OK


def cmd_fewshot(cfg: dict, args) -> int:
    _check_keys(cfg, {"source_checkpoint", "target_dataset", "target_test_route", "ks", "seeds",
                      "fine_tune", "full_reference", "out"}, "fewshot")
    model = load_checkpoint(_require(cfg, "source_checkpoint", "fewshot"))
    target, split = _load_dataset(cfg, "target_dataset", "target_test_route")
    ks = [int(k) for k in cfg.get("ks", [0, 10, 25, 50, 100, 200])]
    seeds = [args.seed] if args.seed is not None else [int(s) for s in cfg.get("seeds", [0, 1, 2])]
    ft = _train_config(cfg.get("fine_tune"), "fine_tune", FINE_TUNE, None)
    if any(k > len(split.train_ids) for k in ks):
        raise ConfigError(f"k list {ks} exceeds the {len(split.train_ids)} target training samples")
    rows = fewshot_sweep(model, target, split, ks, seeds, ft)
    full = []
    ref = cfg.get("full_reference")
    if ref:
        ref = {} if ref is True else dict(ref)
        tcfg_vals = ref.pop("train", None)
        _check_keys(ref, set(), "full_reference")
        for seed in seeds:
            tcfg = _train_config(tcfg_vals, "full_reference.train", TrainConfig(), seed)
            scratch = Model.create(model.kind, model.cfg, seed)
            fit(scratch, target.subset(split.train_ids), tcfg)
            full.append(("full", seed, evaluate(scratch, target.subset(split.test_ids)).accuracy))
    out, h = _out(cfg, args), config_hash(cfg)
    write_csv(out / "fewshot.csv", ("k", "seed", "accuracy"), rows + full, h)
    med = median_by_k(rows)
    if full:
        med_full = float(np.median([r[2] for r in full]))
    write_csv(out / "fewshot_median.csv", ("k", "median_accuracy"),
              [(k, v) for k, v in med.items()] + ([("full", med_full)] if full else []), h)
    for k, v in med.items():
        print(f"k={k}: median accuracy {v:.4f}")
    if full:
        print(f"full-sample target training: median accuracy {med_full:.4f}")
    return EXIT_OK


def cmd_noise(cfg: dict, args) -> int:
    _check_keys(cfg, {"dataset", "test_route", "checkpoints", "variances", "seed", "out"}, "noise")
    ds, split = _load_dataset(cfg, "dataset", "test_route")
    ckpts = _require(cfg, "checkpoints", "noise")
    if not isinstance(ckpts, dict) or not ckpts:
        raise ConfigError("noise: checkpoints must map model names to checkpoint paths")
    models = {name: load_checkpoint(p) for name, p in ckpts.items()}
    variances = [float(v) for v in cfg.get("variances", NOISE_GRID)]
    if any(v < 0 for v in variances):
        raise ConfigError("noise: variances must be non-negative")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    rows = noise_sweep(models, ds.subset(split.test_ids), variances, seed)
    write_csv(_out(cfg, args) / "noise.csv", ("variance", "model", "accuracy"), rows, config_hash(cfg))
    for v, name, acc in rows:
        print(f"variance {v:.2f} {name}: {acc:.4f}")
    return EXIT_OK


def cmd_position(cfg: dict, args) -> int:
    _check_keys(cfg, {"dataset", "test_route", "checkpoint", "seed", "random_k", "out"}, "position")
    ds, split = _load_dataset(cfg, "dataset", "test_route")
    model = load_checkpoint(_require(cfg, "checkpoint", "position"))
    samples = ds.subset(split.test_ids)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    rows = run_positioning(ds, samples, model.predict_proba(samples), seed,
                           int(cfg.get("random_k", 3)))
    means = write_positioning(rows, _out(cfg, args), config_hash(cfg))
    for m, v in means.items():
        print(f"{m}: mean positioning error {v:.3f} m")
    stuck = [f"{r.snapshot_id}/{r.method}" for r in rows if not r.converged]
    if stuck:
        log.warning("solver did not converge for %d solves: %s", len(stuck), ", ".join(stuck[:10]))
        if args.strict:
            raise NonConvergence(f"{len(stuck)} solves did not converge")
    return EXIT_OK


COMMANDS: dict[str, Callable[[dict, argparse.Namespace], int]] = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
    "fewshot": cmd_fewshot, "noise": cmd_noise, "position": cmd_position,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uavlos", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="YAML experiment config")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out", default=None, help="override the output path")
        s.add_argument("--threads", type=int, default=1, help="worker processes (1 = bit-reproducible)")
        s.add_argument("--strict", action="store_true", help="exit 4 on solver non-convergence")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return COMMANDS[args.command](load_config(args.config), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergence as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (UavLosError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
