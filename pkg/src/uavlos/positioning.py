"""ToA trilateration, receiver-selection policies and error statistics.

The solver minimises F(x) = sum_i a_i^2 (d_i - |x - x_i|)^2 with a
Levenberg-Marquardt loop. Receivers sit on the ground plane, so F is
symmetric under z -> -z there; the solver keeps the solution above ground.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .channel import C
from .errors import DomainError, InsufficientDataError
from .scene import Vec3

LAMBDA0 = 1e-3
STEP_TOL = 1e-9
MAX_ITER = 100


@dataclass(frozen=True)
class Measurement:
    rx_pos: Vec3
    toa: float
    weight: float = 1.0
    predicted_los: int = 0
    true_los: int = 0


@dataclass(frozen=True)
class PositionEstimate:
    pos: Vec3
    cost: float
    iterations: int
    converged: bool
    used_rx_count: int


@dataclass(frozen=True)
class Selection:
    measurements: list[Measurement]
    fallback: bool = False


def toa_to_distance(toa):
    """d = c * ToA; accepts scalars or arrays (inf stays inf)."""
    t = np.asarray(toa, dtype=np.float64)
    if np.any(t < 0):
        raise DomainError("time of arrival must be non-negative")
    d = C * t
    return float(d) if d.ndim == 0 else d


def _arrays(measurements: Sequence[Measurement]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rx = np.array([m.rx_pos for m in measurements], dtype=np.float64).reshape(-1, 3)
    d = np.array([C * m.toa for m in measurements], dtype=np.float64)
    a = np.array([m.weight for m in measurements], dtype=np.float64)
    return rx, d, a


def _residuals(x: np.ndarray, rx: np.ndarray, d: np.ndarray, a: np.ndarray) -> np.ndarray:
    return a * (d - np.linalg.norm(x - rx, axis=1))


def cost(x, measurements: Sequence[Measurement]) -> float:
    """F(x) = sum_i a_i^2 f_i(x)^2 with f_i = d_i - |x - x_i|."""
    if not measurements:
        raise InsufficientDataError("cost needs at least one measurement")
    rx, d, a = _arrays(measurements)
    r = _residuals(np.asarray(x, dtype=np.float64), rx, d, a)
    return float(r @ r)


def _jacobian(x: np.ndarray, rx: np.ndarray, a: np.ndarray) -> np.ndarray:
    diff = x - rx
    n = np.linalg.norm(diff, axis=1)
    safe = np.where(n > 0, n, 1.0)
    return -(a / safe)[:, None] * diff * (n > 0)[:, None]


def _lm(x0: np.ndarray, rx: np.ndarray, d: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, float, int, bool]:
    x = x0.astype(np.float64).copy()
    r = _residuals(x, rx, d, a)
    f = float(r @ r)
    lam = LAMBDA0
    for it in range(1, MAX_ITER + 1):
        J = _jacobian(x, rx, a)
        A = J.T @ J
        g = J.T @ r
        try:
            step = np.linalg.solve(A + lam * np.eye(3), -g)
        except np.linalg.LinAlgError:
            step = -g / (lam + np.trace(A))
        if np.linalg.norm(step) < STEP_TOL or f == 0.0:
            return x, f, it, True
        xn = x + step
        rn = _residuals(xn, rx, d, a)
        fn = float(rn @ rn)
        if fn < f:
            x, r, f = xn, rn, fn
            lam /= 10.0
        else:
            lam *= 10.0
    return x, f, MAX_ITER, False


def auto_init(measurements: Sequence[Measurement]) -> Vec3:
    """Centroid of the receivers lifted by mean(d)/sqrt(2) along +z."""
    rx, d, a = _arrays(measurements)
    keep = a > 0 if np.any(a > 0) else np.ones_like(a, dtype=bool)
    c = rx[keep].mean(axis=0)
    return Vec3(c[0], c[1], c[2] + d[keep].mean() / math.sqrt(2.0))


def solve_position(measurements: Sequence[Measurement], init: Vec3 | None = None) -> PositionEstimate:
    """Weighted nonlinear least squares by Levenberg-Marquardt.

    A solution below ground is restarted from its mirror image; the best
    candidate with z >= 0 is returned.
    """
    if len(measurements) < 3:
        raise InsufficientDataError(f"need >= 3 measurements, got {len(measurements)}")
    rx, d, a = _arrays(measurements)
    if not np.all(np.isfinite(d)):
        raise DomainError("measurements must have finite ToA")
    x0 = np.asarray(auto_init(measurements) if init is None else init, dtype=np.float64)
    x, f, its, ok = _lm(x0, rx, d, a)
    if x[2] < 0:
        mirror = x * np.array([1.0, 1.0, -1.0])
        x2, f2, its2, ok2 = _lm(mirror, rx, d, a)
        its += its2
        cands = [(f2, x2, ok2)] if x2[2] >= 0 else []
        fm = float(_residuals(mirror, rx, d, a) @ _residuals(mirror, rx, d, a))
        cands.append((fm, mirror, ok))
        if x2[2] < 0:
            m2 = x2 * np.array([1.0, 1.0, -1.0])
            r2 = _residuals(m2, rx, d, a)
            cands.append((float(r2 @ r2), m2, ok2))
        f, x, ok = min(cands, key=lambda c: c[0])
    return PositionEstimate(Vec3.of(x), f, its, ok, len(measurements))


# ---------------------------------------------------------------------------
# selection policies

def _finite(measurements: Sequence[Measurement]) -> list[Measurement]:
    return [m for m in measurements if math.isfinite(m.toa)]


def select_random(measurements: Sequence[Measurement], k: int = 3, seed: int = 0) -> Selection:
    """k receivers drawn uniformly without replacement from those with finite ToA."""
    pool = _finite(measurements)
    if len(pool) < k:
        raise InsufficientDataError(f"only {len(pool)} receivers with finite ToA, need {k}")
    idx = np.random.default_rng(seed).choice(len(pool), size=k, replace=False)
    return Selection([replace(pool[i], weight=1.0) for i in idx])


def select_predicted_los(measurements: Sequence[Measurement], prob: np.ndarray | None = None,
                         min_count: int = 3) -> Selection:
    """Receivers predicted LoS (prob >= 0.5) with finite ToA.

    With fewer than ``min_count`` such receivers, the ``min_count`` finite-ToA
    receivers of highest probability are used and ``fallback`` is set.
    """
    if prob is None:
        p = np.array([float(m.predicted_los) for m in measurements])
    else:
        p = np.asarray(prob, dtype=np.float64).reshape(-1)
        if p.size != len(measurements):
            raise DomainError(f"prediction has {p.size} cells for {len(measurements)} receivers")
    finite = np.array([math.isfinite(m.toa) for m in measurements], dtype=bool)
    chosen = np.flatnonzero((p >= 0.5) & finite)
    if chosen.size >= min_count:
        return Selection([replace(measurements[i], weight=1.0) for i in chosen])
    cand = np.flatnonzero(finite)
    if cand.size < min_count:
        raise InsufficientDataError(f"only {cand.size} receivers with finite ToA")
    top = cand[np.argsort(-p[cand], kind="stable")[:min_count]]
    return Selection([replace(measurements[i], weight=1.0) for i in sorted(top)], fallback=True)


def select_true_los(measurements: Sequence[Measurement]) -> Selection:
    """Oracle policy: receivers whose ground-truth label is LoS."""
    chosen = [replace(m, weight=1.0) for m in measurements if m.true_los and math.isfinite(m.toa)]
    if len(chosen) < 3:
        raise InsufficientDataError(f"only {len(chosen)} true-LoS receivers")
    return Selection(chosen)


def measurements_for(rx: np.ndarray, toa: np.ndarray, labels: np.ndarray,
                     prob: np.ndarray | None = None) -> list[Measurement]:
    """One measurement per receiver of a grid, in row-major order."""
    toa = np.asarray(toa, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pred = np.zeros_like(labels) if prob is None else (np.asarray(prob).reshape(-1) >= 0.5)
    return [Measurement(Vec3.of(rx[i]), float(toa[i]), 1.0, int(pred[i]), int(labels[i]))
            for i in range(len(toa))]


# ---------------------------------------------------------------------------
# errors

def positioning_error(estimate: PositionEstimate | Vec3, truth: Vec3) -> float:
    pos = estimate.pos if isinstance(estimate, PositionEstimate) else estimate
    return float(np.linalg.norm(np.asarray(pos, dtype=np.float64) - np.asarray(truth, dtype=np.float64)))


def error_cdf(errors: Sequence[float]) -> list[tuple[float, float]]:
    """Empirical CDF: (error, fraction of errors <= error), one row per distinct value."""
    e = np.sort(np.asarray(errors, dtype=np.float64))
    if e.size == 0:
        raise DomainError("error_cdf needs at least one error")
    n = e.size
    out: list[tuple[float, float]] = []
    for i, v in enumerate(e, start=1):
        if out and out[-1][0] == v:
            out[-1] = (float(v), i / n)
        else:
            out.append((float(v), i / n))
    return out
