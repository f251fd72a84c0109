"""Independent oracles and small builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from uavlos import tensor as T
from uavlos.scene import Building, RxGrid, Scenario, Snapshot, Trajectory, Vec3


def scene_with(boxes, name: str = "test", grid_side: float = 150.0, g: int = 30) -> Scenario:
    """Scenario from (min, max) corner pairs and a dummy one-waypoint route."""
    buildings = tuple(Building(Vec3.of(lo), Vec3.of(hi), i) for i, (lo, hi) in enumerate(boxes))
    route = Trajectory(1, (Vec3(0.0, 0.0, 100.0),), 1)
    return Scenario(name, (1000.0, 1000.0), buildings, (route,), 0, (), grid_side, g)


def snapshot_at(tx, g: int = 30, side: float = 150.0, center=None) -> Snapshot:
    cx, cy = (tx[0], tx[1]) if center is None else center
    return Snapshot(Vec3.of(tx), 1, 0, RxGrid(Vec3(cx, cy, 0.0), side, g))


# ---------------------------------------------------------------------------
# segment sampling oracle

def sampled_state(p, q, boxes, n: int = 2000, eps: float = 1e-6) -> str:
    """Classify segment p->q by point sampling: 'blocked', 'free' or 'shell'.

    A sample strictly inside a box shrunk by ``eps`` proves occlusion; if no
    sample lies inside the boxes grown by ``eps`` the segment is free;
    anything else touches the eps shell around a face.
    """
    p, q = np.asarray(p, float), np.asarray(q, float)
    t = (np.arange(n) + 0.5) / n
    pts = p + t[:, None] * (q - p)
    blocked_in = blocked_out = False
    for lo, hi in np.asarray(boxes, float).reshape(-1, 2, 3):
        inner = np.all((pts > lo + eps) & (pts < hi - eps), axis=1)
        outer = np.all((pts > lo - eps) & (pts < hi + eps), axis=1)
        blocked_in |= bool(inner.any())
        blocked_out |= bool(outer.any())
    if blocked_in:
        return "blocked"
    return "shell" if blocked_out else "free"


# ---------------------------------------------------------------------------
# finite differences

def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def fd_check(fn, arrays: list[np.ndarray], seed: int = 0, h: float = 1e-5) -> float:
    """Relative error between backprop and central differences, all inputs jointly.

    ``fn`` maps a list of Tensors to a Tensor; the scalar checked is
    sum(fn(...) * R) for a fixed random R.
    """
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        ts = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = fn(ts)
        R = rng.normal(size=out.shape)

        def scalar(vals):
            with T.no_grad():
                o = fn([T.Tensor(v) for v in vals])
            return float(np.sum(o.data * R))

        loss = T.sum(T.mul(out, T.Tensor(R)))
        loss.backward()
        ana = np.concatenate([np.ravel(t.grad if t.grad is not None else np.zeros(t.shape))
                              for t in ts])
        vals = [t.data.copy() for t in ts]
        num = []
        for v in vals:
            for i in range(v.size):
                old = v.flat[i]
                v.flat[i] = old + h
                fp = scalar(vals)
                v.flat[i] = old - h
                fm = scalar(vals)
                v.flat[i] = old
                num.append((fp - fm) / (2 * h))
    return rel_error(np.array(num), ana)


# ---------------------------------------------------------------------------
# naive reference computations

def naive_conv(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    C, H, Wd = x.shape
    Co, _, k, _ = W.shape
    p = k // 2
    out = np.zeros((Co, H, Wd))
    for o in range(Co):
        for i in range(H):
            for j in range(Wd):
                acc = b[o]
                for c in range(C):
                    for di in range(k):
                        for dj in range(k):
                            ii, jj = i + di - p, j + dj - p
                            if 0 <= ii < H and 0 <= jj < Wd:
                                acc += W[o, c, di, dj] * x[c, ii, jj]
                out[o, i, j] = acc
    return out


def reference_attention(Z: np.ndarray, p: dict[str, np.ndarray], heads: int) -> np.ndarray:
    N, D = Z.shape
    dh = D // heads
    Q = Z @ p["wq"].T + p["bq"]
    K = Z @ p["wk"].T + p["bk"]
    V = Z @ p["wv"].T + p["bv"]
    outs = []
    for h in range(heads):
        q, k, v = (M[:, h * dh:(h + 1) * dh] for M in (Q, K, V))
        s = q @ k.T / np.sqrt(dh)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        a = s / s.sum(axis=1, keepdims=True)
        outs.append(a @ v)
    return np.concatenate(outs, axis=1) @ p["wo"].T + p["bo"]
