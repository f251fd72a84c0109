"""Ray-geometric ground truth for UAV-to-ground links.

LoS labels come from a segment/box slab test. Multipath is enumerated with
the image (mirror) method up to second-order specular reflections off
building faces; each path contributes a free-space amplitude with a fixed
per-bounce reflection loss and a carrier phase. The stored CIR is one
complex narrowband coefficient per receiver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .scene import Scenario, Snapshot, Vec3, rx_positions

C = 299_792_458.0
GRAZE_TOL = 1e-9

DEFAULT_FREQ_HZ = 28e9
DEFAULT_REFLECTION_LOSS = 0.3
DEFAULT_MAX_ORDER = 2


@dataclass(frozen=True)
class ChannelConfig:
    freq_hz: float = DEFAULT_FREQ_HZ
    max_order: int = DEFAULT_MAX_ORDER
    reflection_loss: float = DEFAULT_REFLECTION_LOSS

    def __post_init__(self):
        if self.max_order not in (0, 1, 2):
            raise DomainError("max_order must be 0, 1 or 2")
        if self.freq_hz <= 0:
            raise DomainError("carrier frequency must be positive")


@dataclass(frozen=True)
class PropPath:
    vertices: tuple[Vec3, ...]
    order: int
    length: float
    delay: float
    gain: complex


# ---------------------------------------------------------------------------
# occlusion

def occluded(p: np.ndarray, q: np.ndarray, boxes: np.ndarray, tol: float = GRAZE_TOL) -> np.ndarray:
    """Vectorised open-segment/box test.

    ``p`` and ``q`` are (M, 3) endpoints, ``boxes`` is (K, 2, 3). Returns a
    (M,) bool array, true where segment (p, q) passes through the interior of
    some box shrunk by ``tol`` (so grazing contact does not occlude).
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    out = np.zeros(len(p), dtype=bool)
    if len(boxes) == 0 or len(p) == 0:
        return out
    lo = boxes[None, :, 0, :] + tol
    hi = boxes[None, :, 1, :] - tol
    chunk = max(1, 200_000 // len(boxes))
    for s in range(0, len(p), chunk):
        ps = p[s:s + chunk, None, :]
        d = q[s:s + chunk, None, :] - ps
        flat = d == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - ps) / d
            t2 = (hi - ps) / d
        tmin = np.where(flat, -np.inf, np.minimum(t1, t2))
        tmax = np.where(flat, np.inf, np.maximum(t1, t2))
        # a segment parallel to a slab must already lie strictly within it
        inside_flat = (ps > lo) & (ps < hi)
        miss_flat = np.any(flat & ~inside_flat, axis=2)
        tnear = tmin.max(axis=2)
        tfar = tmax.min(axis=2)
        hit = (tnear < tfar) & (tfar > 0.0) & (tnear < 1.0) & ~miss_flat
        out[s:s + chunk] = hit.any(axis=1)
    return out


def segment_occluded(p: Vec3, q: Vec3, scenario: Scenario) -> bool:
    """True iff the open segment (p, q) crosses a building interior."""
    if tuple(p) == tuple(q):
        raise DomainError("segment endpoints coincide")
    return bool(occluded(np.asarray(p)[None], np.asarray(q)[None], scenario.boxes())[0])


def inside_buildings(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Points strictly inside a footprint and below the roof (ground level included)."""
    if len(boxes) == 0:
        return np.zeros(len(points), dtype=bool)
    pt = points[:, None, :]
    lo, hi = boxes[None, :, 0, :], boxes[None, :, 1, :]
    xy = np.all((pt[..., :2] > lo[..., :2]) & (pt[..., :2] < hi[..., :2]), axis=2)
    z = (pt[..., 2] >= lo[..., 2]) & (pt[..., 2] < hi[..., 2])
    return np.any(xy & z, axis=1)


# ---------------------------------------------------------------------------
# reflecting faces

@dataclass(frozen=True)
class _Faces:
    axis: np.ndarray      # (F,) int
    coord: np.ndarray     # (F,) plane coordinate along axis
    sign: np.ndarray      # (F,) outward normal sign (+1/-1)
    lo: np.ndarray        # (F, 3) rectangle bounds (lo[axis] == hi[axis] == coord)
    hi: np.ndarray
    box: np.ndarray       # (F,) owning building index

    def __len__(self):
        return len(self.axis)


def _faces(boxes: np.ndarray) -> _Faces:
    axis, coord, sign, lo, hi, owner = [], [], [], [], [], []
    for k, (bmin, bmax) in enumerate(boxes):
        # the floor face (z = 0) sits on the ground and never reflects
        for a, s in ((0, -1), (0, 1), (1, -1), (1, 1), (2, 1)):
            c = bmin[a] if s < 0 else bmax[a]
            flo, fhi = bmin.copy(), bmax.copy()
            flo[a] = fhi[a] = c
            axis.append(a); coord.append(c); sign.append(s)
            lo.append(flo); hi.append(fhi); owner.append(k)
    if not axis:
        return _Faces(np.zeros(0, int), np.zeros(0), np.zeros(0), np.zeros((0, 3)),
                      np.zeros((0, 3)), np.zeros(0, int))
    return _Faces(np.array(axis), np.array(coord, dtype=np.float64), np.array(sign, dtype=np.float64),
                  np.array(lo), np.array(hi), np.array(owner))


def _mirror(points: np.ndarray, axis: np.ndarray, coord: np.ndarray) -> np.ndarray:
    out = np.array(points, dtype=np.float64, copy=True)
    idx = np.arange(len(out))
    out[idx, axis] = 2.0 * coord - out[idx, axis]
    return out


_FRONT_EPS = 1e-9
_RECT_EPS = 1e-9


@dataclass
class PathGroup:
    """Paths of one order for a set of receivers (possibly several per receiver)."""

    order: int
    rx_index: np.ndarray   # (n,)
    vertices: np.ndarray   # (n, order + 2, 3)
    length: np.ndarray     # (n,)


def trace(tx: np.ndarray, rxs: np.ndarray, boxes: np.ndarray, max_order: int) -> list[PathGroup]:
    """Enumerate direct and specular paths from ``tx`` to each receiver in ``rxs``."""
    tx = np.asarray(tx, dtype=np.float64)
    rxs = np.atleast_2d(np.asarray(rxs, dtype=np.float64))
    R = len(rxs)
    groups: list[PathGroup] = []
    blocked_rx = inside_buildings(rxs, boxes)

    # order 0
    txs = np.broadcast_to(tx, rxs.shape)
    ok = ~occluded(txs, rxs, boxes) & ~blocked_rx
    idx = np.flatnonzero(ok)
    groups.append(PathGroup(0, idx, np.stack([txs[idx], rxs[idx]], axis=1),
                            np.linalg.norm(rxs[idx] - tx, axis=1)))
    if max_order < 1 or len(boxes) == 0:
        return groups

    f = _faces(boxes)
    F = len(f)
    fidx = np.arange(F)
    tx_side = f.sign * (tx[f.axis] - f.coord)
    live1 = tx_side > _FRONT_EPS
    rx_side = f.sign[:, None] * (rxs.T[f.axis] - f.coord[:, None])      # (F, R)
    rx_front = (rx_side > _FRONT_EPS) & ~blocked_rx[None, :]

    # order 1: reflection point on segment rx -> image(tx)
    img1 = _mirror(np.broadcast_to(tx, (F, 3)), f.axis, f.coord)        # (F, 3)
    fi, ri, P = _hits(f, fidx[live1], img1[live1], rxs, rx_front)
    if len(fi):
        ok = ~occluded(np.broadcast_to(tx, P.shape), P, boxes) & ~occluded(P, rxs[ri], boxes)
        groups.append(PathGroup(
            1, ri[ok],
            np.stack([np.broadcast_to(tx, P[ok].shape), P[ok], rxs[ri[ok]]], axis=1),
            np.linalg.norm(img1[fi[ok]] - rxs[ri[ok]], axis=1)))
    if max_order < 2:
        return groups

    # order 2: tx -> f1 -> f2 -> rx via double mirroring
    rx_idx, verts, lens = [], [], []
    for f1 in np.flatnonzero(live1):
        im1 = img1[f1]
        f2s = fidx[(f.box != f.box[f1])]
        side2 = f.sign[f2s] * (im1[f.axis[f2s]] - f.coord[f2s])
        f2s = f2s[side2 > _FRONT_EPS]
        if not len(f2s):
            continue
        im2 = _mirror(np.broadcast_to(im1, (len(f2s), 3)), f.axis[f2s], f.coord[f2s])
        f2, ri, P2 = _hits(f, f2s, im2, rxs, rx_front)
        if not len(f2):
            continue
        a1 = f.axis[f1]
        keep = f.sign[f1] * (P2[:, a1] - f.coord[f1]) > _FRONT_EPS
        if not keep.any():
            continue
        f2, ri, P2 = f2[keep], ri[keep], P2[keep]
        t = (f.coord[f1] - P2[:, a1]) / (im1[a1] - P2[:, a1])
        P1 = P2 + t[:, None] * (im1 - P2)
        P1[:, a1] = f.coord[f1]
        keep = np.all((P1 >= f.lo[f1] - _RECT_EPS) & (P1 <= f.hi[f1] + _RECT_EPS), axis=1)
        if not keep.any():
            continue
        P1, P2, ri, f2 = P1[keep], P2[keep], ri[keep], f2[keep]
        rx = rxs[ri]
        ok = (~occluded(np.broadcast_to(tx, P1.shape), P1, boxes)
              & ~occluded(P1, P2, boxes) & ~occluded(P2, rx, boxes))
        if not ok.any():
            continue
        img2 = _mirror(np.broadcast_to(im1, (int(ok.sum()), 3)), f.axis[f2[ok]], f.coord[f2[ok]])
        rx_idx.append(ri[ok])
        verts.append(np.stack([np.broadcast_to(tx, P1[ok].shape), P1[ok], P2[ok], rx[ok]], axis=1))
        lens.append(np.linalg.norm(img2 - rx[ok], axis=1))
    if rx_idx:
        groups.append(PathGroup(2, np.concatenate(rx_idx), np.concatenate(verts), np.concatenate(lens)))
    return groups


def _hits(f: _Faces, faces: np.ndarray, images: np.ndarray, rxs: np.ndarray,
          rx_front: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Where the segment receiver -> image crosses each face's rectangle.

    Returns (face index, receiver index, crossing point) for every hit with the
    receiver in front of the face.
    """
    out_f, out_r, out_p = [], [], []
    for a in range(3):
        sel = f.axis[faces] == a
        if not sel.any():
            continue
        fa, im = faces[sel], images[sel]
        u, v = [k for k in range(3) if k != a]
        c = f.coord[fa][:, None]
        rx_a = rxs[:, a][None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (c - rx_a) / (im[:, a][:, None] - rx_a)
        pu = rxs[:, u] + t * (im[:, u][:, None] - rxs[:, u])
        mask = rx_front[fa] & (pu >= f.lo[fa, u][:, None] - _RECT_EPS) & (pu <= f.hi[fa, u][:, None] + _RECT_EPS)
        pv = rxs[:, v] + t * (im[:, v][:, None] - rxs[:, v])
        mask &= (pv >= f.lo[fa, v][:, None] - _RECT_EPS) & (pv <= f.hi[fa, v][:, None] + _RECT_EPS)
        i, r = np.nonzero(mask)
        if not len(i):
            continue
        P = np.empty((len(i), 3))
        P[:, a] = f.coord[fa[i]]
        P[:, u] = pu[i, r]
        P[:, v] = pv[i, r]
        out_f.append(fa[i]); out_r.append(r); out_p.append(P)
    if not out_f:
        return np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3))
    return np.concatenate(out_f), np.concatenate(out_r), np.concatenate(out_p)


# ---------------------------------------------------------------------------
# public operations

def path_gain(path: PropPath, freq_hz: float = DEFAULT_FREQ_HZ,
              reflection_loss: float = DEFAULT_REFLECTION_LOSS) -> complex:
    """Free-space amplitude, per-bounce loss and carrier phase of one path."""
    if path.length <= 0:
        raise DomainError("path length must be positive")
    return complex(_gains(np.array([path.length]), np.array([path.order]), freq_hz, reflection_loss)[0])


def _gains(length: np.ndarray, order: np.ndarray, freq_hz: float, reflection_loss: float) -> np.ndarray:
    lam = C / freq_hz
    amp = lam / (4.0 * np.pi * length) * reflection_loss ** order
    # phase 2*pi*f*delay == 2*pi*length/lambda; reduce before exp to keep precision
    cycles = np.mod(length / lam, 1.0)
    return amp * np.exp(-2j * np.pi * cycles)


def enumerate_paths(tx: Vec3, rx: Vec3, scenario: Scenario, max_order: int = DEFAULT_MAX_ORDER,
                    freq_hz: float = DEFAULT_FREQ_HZ,
                    reflection_loss: float = DEFAULT_REFLECTION_LOSS) -> list[PropPath]:
    """All direct/specular paths between two points, sorted by delay."""
    if max_order not in (0, 1, 2):
        raise DomainError("max_order must be 0, 1 or 2")
    paths = []
    for grp in trace(np.asarray(tx), np.asarray(rx)[None], scenario.boxes(), max_order):
        gains = _gains(grp.length, np.full(len(grp.length), grp.order), freq_hz, reflection_loss)
        for v, L, gn in zip(grp.vertices, grp.length, gains):
            paths.append(PropPath(tuple(Vec3.of(p) for p in v), grp.order, float(L),
                                  float(L) / C, complex(gn)))
    paths.sort(key=lambda p: (p.delay, p.order))
    return paths


@dataclass
class SnapshotChannel:
    labels: np.ndarray   # (g, g) uint8
    cir: np.ndarray      # (g, g) complex128
    toa: np.ndarray      # (g, g) float64, +inf where no path


def simulate(snapshot: Snapshot, scenario: Scenario, cfg: ChannelConfig = ChannelConfig()) -> SnapshotChannel:
    """Labels, complex CIR and first-arrival ToA for every receiver of a snapshot."""
    g = snapshot.grid.g
    rxs = rx_positions(snapshot.grid)
    tx = np.asarray(snapshot.uav_pos)
    groups = trace(tx, rxs, scenario.boxes(), cfg.max_order)
    labels = np.zeros(g * g, dtype=np.uint8)
    labels[groups[0].rx_index] = 1
    cir = np.zeros(g * g, dtype=np.complex128)
    toa = np.full(g * g, np.inf)
    for grp in groups:
        if not len(grp.rx_index):
            continue
        gains = _gains(grp.length, np.full(len(grp.length), grp.order), cfg.freq_hz, cfg.reflection_loss)
        np.add.at(cir, grp.rx_index, gains)
        np.minimum.at(toa, grp.rx_index, grp.length / C)
    return SnapshotChannel(labels.reshape(g, g), cir.reshape(g, g), toa.reshape(g, g))


def los_labels(snapshot: Snapshot, scenario: Scenario) -> np.ndarray:
    """(g, g) uint8 grid: 1 where the UAV-to-receiver segment is unobstructed."""
    rxs = rx_positions(snapshot.grid)
    boxes = scenario.boxes()
    tx = np.broadcast_to(np.asarray(snapshot.uav_pos), rxs.shape)
    los = ~occluded(tx, rxs, boxes) & ~inside_buildings(rxs, boxes)
    g = snapshot.grid.g
    return los.astype(np.uint8).reshape(g, g)


def cir_matrix(snapshot: Snapshot, scenario: Scenario, freq_hz: float = DEFAULT_FREQ_HZ,
               max_order: int = DEFAULT_MAX_ORDER,
               reflection_loss: float = DEFAULT_REFLECTION_LOSS) -> np.ndarray:
    """(2, g, g) array: real and imaginary planes of the summed path gains."""
    ch = simulate(snapshot, scenario, ChannelConfig(freq_hz, max_order, reflection_loss))
    return np.stack([ch.cir.real, ch.cir.imag])


def first_arrival_toa(snapshot: Snapshot, scenario: Scenario,
                      max_order: int = DEFAULT_MAX_ORDER) -> np.ndarray:
    """(g, g) first-arrival delay in seconds, +inf where no path exists."""
    return simulate(snapshot, scenario, ChannelConfig(max_order=max_order)).toa
