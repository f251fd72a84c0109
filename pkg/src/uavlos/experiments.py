"""Experiment protocols shared by the command line and the acceptance suite.

Each protocol takes in-memory datasets and models and returns plain rows;
the ``write_*`` helpers put them on disk as CSV with a config-hash comment.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .dataset import Dataset, Sample, Split, few_shot_subset, normalize_cir, split_by_route
from .errors import InsufficientDataError
from .model import FINE_TUNE, Model, TrainConfig, evaluate, fine_tune
from .positioning import (error_cdf, measurements_for, positioning_error, select_predicted_los,
                          select_random, select_true_los, solve_position)
from .sensing import Image, add_gaussian_noise

NOISE_GRID = tuple(round(0.05 * i, 2) for i in range(11))
METHODS = ("random", "predicted_los", "true_los")


def config_hash(cfg: Any) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]],
              cfg_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_sha256={cfg_hash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in r])
    return path


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def prepare(ds: Dataset, test_route: int) -> tuple[Dataset, Split]:
    """Route-held-out split plus CIR standardisation from the training routes."""
    split = split_by_route(ds, test_route)
    if ds.meta.get("normalized"):
        return ds, split
    return normalize_cir(ds, split), split


def snapshot_id(s: Sample) -> str:
    return f"r{s.route_id}-s{s.snapshot_index}"


# ---------------------------------------------------------------------------
# positioning

@dataclass(frozen=True)
class PositionRow:
    snapshot_id: str
    method: str
    error_m: float
    used_rx: int
    converged: bool
    fallback: bool = False


def position_snapshot(ds: Dataset, sample: Sample, prob: np.ndarray, seed: int,
                      k_random: int = 3) -> list[PositionRow]:
    """Solve one snapshot under the three receiver-selection policies."""
    rx = ds.rx_positions(sample)
    meas = measurements_for(rx, sample.toa, sample.labels, prob)
    sid = snapshot_id(sample)
    rows = []
    for method in METHODS:
        if method == "random":
            sel = select_random(meas, k_random, seed)
        elif method == "predicted_los":
            sel = select_predicted_los(meas, prob)
        else:
            try:
                sel = select_true_los(meas)
            except InsufficientDataError:
                sel = select_predicted_los(meas, sample.labels.astype(float))
        est = solve_position(sel.measurements)
        rows.append(PositionRow(sid, method, positioning_error(est, sample.uav_pos),
                                est.used_rx_count, est.converged, sel.fallback))
    return rows


def run_positioning(ds: Dataset, samples: Sequence[Sample], probs: np.ndarray, seed: int = 0,
                    k_random: int = 3) -> list[PositionRow]:
    rows: list[PositionRow] = []
    for i, s in enumerate(samples):
        rows.extend(position_snapshot(ds, s, probs[i], seed * 1_000_003 + i, k_random))
    return rows


def mean_errors(rows: Sequence[PositionRow]) -> dict[str, float]:
    return {m: float(np.mean([r.error_m for r in rows if r.method == m])) for m in METHODS
            if any(r.method == m for r in rows)}


def write_positioning(rows: Sequence[PositionRow], out: str | Path, cfg_hash: str) -> dict[str, float]:
    out = Path(out)
    write_csv(out / "position_per_snapshot.csv",
              ("snapshot_id", "method", "error_m", "used_rx", "converged", "fallback"),
              ((r.snapshot_id, r.method, r.error_m, r.used_rx, int(r.converged), int(r.fallback))
               for r in rows), cfg_hash)
    means = mean_errors(rows)
    for m in means:
        write_csv(out / f"position_cdf_{m}.csv", ("error_m", "cum_prob"),
                  error_cdf([r.error_m for r in rows if r.method == m]), cfg_hash)
    write_csv(out / "position_summary.csv", ("method", "mean_error_m", "snapshots"),
              ((m, v, sum(r.method == m for r in rows)) for m, v in means.items()), cfg_hash)
    return means


# ---------------------------------------------------------------------------
# noise robustness

def noisy_images(samples: Sequence[Sample], variance: float, seed: int) -> np.ndarray:
    """Test images with Gaussian noise; image i uses seed ``seed + i``."""
    return np.stack([add_gaussian_noise(Image(s.image, 1.0), variance, seed + i).data
                     for i, s in enumerate(samples)])


def noise_sweep(models: dict[str, Model], samples: Sequence[Sample],
                variances: Sequence[float] = NOISE_GRID, seed: int = 0) -> list[tuple[float, str, float]]:
    """(variance, model name, accuracy) for every variance and model."""
    rows = []
    for v in variances:
        imgs = noisy_images(samples, float(v), seed)
        for name, m in models.items():
            rows.append((float(v), name, evaluate(m, samples, images=imgs).accuracy))
    return rows


# ---------------------------------------------------------------------------
# few-shot transfer

def fewshot_sweep(model: Model, target: Dataset, split: Split, ks: Sequence[int],
                  seeds: Sequence[int], ft_cfg: TrainConfig = FINE_TUNE) -> list[tuple[int, int, float]]:
    """(k, seed, target test accuracy) after fine-tuning on k target training samples."""
    test = target.subset(split.test_ids)
    rows = []
    for k in ks:
        for seed in seeds:
            ids = few_shot_subset(target, k, seed, split.train_ids)
            cfg = TrainConfig(ft_cfg.batch_size, ft_cfg.epochs, ft_cfg.lr, seed,
                              ft_cfg.beta1, ft_cfg.beta2, ft_cfg.eps)
            tuned = fine_tune(model, target.subset(ids), cfg)
            rows.append((k, seed, evaluate(tuned, test).accuracy))
    return rows


def median_by_k(rows: Sequence[tuple[int, int, float]]) -> dict[int, float]:
    out: dict[int, list[float]] = {}
    for k, _, acc in rows:
        out.setdefault(k, []).append(acc)
    return {k: float(np.median(v)) for k, v in out.items()}


def majority_rate(samples: Sequence[Sample]) -> float:
    frac = float(np.mean([s.labels.mean() for s in samples]))
    return max(frac, 1.0 - frac)
