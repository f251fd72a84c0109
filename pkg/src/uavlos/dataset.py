"""Aligned (image, CIR, label, ToA) samples, route splits and the SNLD file format.

SNLD layout (little-endian)::

    header  b"SNLD" | u32 version | u32 g | u32 H | u64 count
            | f32 x 4 normalisation (mean_re, mean_im, std_re, std_im)
            | u32 meta length | meta (UTF-8 JSON)
    record  f64 x 3 uav_pos | u32 route | u32 index
            | f32 x 3*H*H image | f32 x 2*g*g cir | u8 x g*g labels
            | f64 x g*g toa (+inf where no path)
"""

from __future__ import annotations

import json
import struct
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .channel import ChannelConfig, simulate
from .errors import DomainError, FormatError, NotFoundError
from .scene import RxGrid, Scenario, Snapshot, Vec3, all_snapshots, rx_positions
from .sensing import CameraSpec, render

MAGIC = b"SNLD"
VERSION = 1
STD_FLOOR = 1e-12

_HEADER = struct.Struct("<4sIIIQ4fI")
_RECORD_HEAD = struct.Struct("<3dII")


@dataclass
class Sample:
    image: np.ndarray        # (3, H, H) float32
    cir: np.ndarray          # (2, g, g) float32
    labels: np.ndarray       # (g, g) uint8
    toa: np.ndarray          # (g, g) float64
    uav_pos: Vec3
    route_id: int
    snapshot_index: int

    @property
    def g(self) -> int:
        return self.labels.shape[0]


def _identity_norm() -> np.ndarray:
    return np.array([[0.0, 0.0], [1.0, 1.0]], dtype=np.float32)


@dataclass
class Dataset:
    samples: list[Sample]
    # rows: (mean, std); columns: (real, imag)
    normalization: np.ndarray = field(default_factory=_identity_norm)
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def g(self) -> int:
        return int(self.meta.get("g", self.samples[0].g if self.samples else 0))

    @property
    def routes(self) -> list[int]:
        return sorted({s.route_id for s in self.samples})

    def subset(self, ids) -> list[Sample]:
        return [self.samples[i] for i in ids]

    def rx_positions(self, sample: Sample) -> np.ndarray:
        """Receiver coordinates of a sample's grid, (g*g, 3)."""
        grid = RxGrid(Vec3(sample.uav_pos.x, sample.uav_pos.y, 0.0),
                      float(self.meta["grid_side"]), self.g)
        return rx_positions(grid)

    def los_fraction(self) -> float:
        if not self.samples:
            return float("nan")
        return float(np.mean([s.labels.mean() for s in self.samples]))


@dataclass(frozen=True)
class Split:
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]


# ---------------------------------------------------------------------------
# generation

def make_sample(snapshot: Snapshot, scenario: Scenario, cam: CameraSpec,
                channel_cfg: ChannelConfig) -> Sample:
    ch = simulate(snapshot, scenario, channel_cfg)
    img = render(snapshot, scenario, cam)
    cir = np.stack([ch.cir.real, ch.cir.imag]).astype(np.float32)
    return Sample(img.data, cir, ch.labels, ch.toa, snapshot.uav_pos,
                  snapshot.route_id, snapshot.index)


def _make_sample_args(args):
    return make_sample(*args)


def generate_dataset(scenario: Scenario, altitude: float | None = None,
                     cam: CameraSpec = CameraSpec(),
                     channel_cfg: ChannelConfig = ChannelConfig(),
                     threads: int = 1) -> Dataset:
    """One sample per snapshot per route, in route then snapshot order."""
    if altitude is not None:
        scenario = scenario.with_altitude(altitude)
    snaps = all_snapshots(scenario)
    jobs = [(s, scenario, cam, channel_cfg) for s in snaps]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(_make_sample_args, jobs, chunksize=4))
    else:
        samples = [make_sample(*j) for j in jobs]
    alt = scenario.routes[0].altitude
    meta = {
        "scenario": scenario.name,
        "seed": scenario.rng_seed,
        "altitude_m": alt,
        "frequency_hz": channel_cfg.freq_hz,
        "max_order": channel_cfg.max_order,
        "reflection_loss": channel_cfg.reflection_loss,
        "g": scenario.grid_g,
        "grid_side": scenario.grid_side,
        "footprint_side": cam.footprint_for(scenario.grid_side, scenario.grid_g),
        "image_side": cam.resolution,
        "normalized": False,
    }
    return Dataset(samples, _identity_norm(), meta)


# ---------------------------------------------------------------------------
# splits

def split_by_route(ds: Dataset, test_route: int) -> Split:
    if test_route not in ds.routes:
        raise NotFoundError(f"route {test_route} not present in dataset")
    test = tuple(i for i, s in enumerate(ds.samples) if s.route_id == test_route)
    train = tuple(i for i, s in enumerate(ds.samples) if s.route_id != test_route)
    if not train:
        warnings.warn(f"holding out route {test_route} leaves an empty training set",
                      stacklevel=2)
    return Split(train, test)


def few_shot_subset(ds: Dataset, k: int, seed: int, pool=None) -> list[int]:
    """``k`` ids drawn uniformly without replacement from ``pool`` (default: all samples)."""
    pool = list(range(len(ds))) if pool is None else list(pool)
    if k < 0 or k > len(pool):
        raise DomainError(f"k={k} outside [0, {len(pool)}]")
    if k == 0:
        return []
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in picked]


def normalize_cir(ds: Dataset, split: Split) -> Dataset:
    """Per-channel standardisation of the CIR using training-split statistics."""
    if ds.meta.get("normalized"):
        raise DomainError("dataset CIR is already normalised")
    ids = split.train_ids if split.train_ids else tuple(range(len(ds)))
    if ids:
        stack = np.stack([ds.samples[i].cir for i in ids]).astype(np.float64)
        mean = stack.mean(axis=(0, 2, 3))
        std = np.maximum(stack.std(axis=(0, 2, 3)), STD_FLOOR)
    else:
        mean, std = np.zeros(2), np.ones(2)
    samples = [replace(s, cir=((s.cir.astype(np.float64) - mean[:, None, None])
                                / std[:, None, None]).astype(np.float32))
               for s in ds.samples]
    norm = np.array([mean, std], dtype=np.float32)
    return Dataset(samples, norm, {**ds.meta, "normalized": True})


# ---------------------------------------------------------------------------
# SNLD format

def save(ds: Dataset, path: str | Path) -> None:
    g = ds.g
    H = int(ds.meta.get("image_side", ds.samples[0].image.shape[-1] if ds.samples else 0))
    meta = json.dumps(ds.meta, sort_keys=True).encode("utf-8")
    norm = np.asarray(ds.normalization, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, g, H, len(ds.samples),
                              norm[0, 0], norm[0, 1], norm[1, 0], norm[1, 1], len(meta)))
        fh.write(meta)
        for s in ds.samples:
            if s.image.shape != (3, H, H) or s.cir.shape != (2, g, g):
                raise FormatError("sample shapes disagree with dataset header")
            fh.write(_RECORD_HEAD.pack(*s.uav_pos, s.route_id, s.snapshot_index))
            fh.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.cir, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(s.toa, dtype="<f8").tobytes())


def load(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("file too short for SNLD header")
    magic, version, g, H, count, m_re, m_im, s_re, s_im, meta_len = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported SNLD version {version}")
    off = _HEADER.size
    if off + meta_len > len(raw):
        raise FormatError("truncated metadata")
    try:
        meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata: {exc}") from exc
    off += meta_len
    n_img, n_cir, n_cell = 3 * H * H, 2 * g * g, g * g
    rec = _RECORD_HEAD.size + 4 * n_img + 4 * n_cir + n_cell + 8 * n_cell
    if len(raw) != off + count * rec:
        raise FormatError(f"expected {count} records of {rec} bytes, file size disagrees")
    samples = []
    for _ in range(count):
        x, y, z, route, index = _RECORD_HEAD.unpack_from(raw, off)
        off += _RECORD_HEAD.size
        img = np.frombuffer(raw, "<f4", n_img, off).astype(np.float32).reshape(3, H, H)
        off += 4 * n_img
        cir = np.frombuffer(raw, "<f4", n_cir, off).astype(np.float32).reshape(2, g, g)
        off += 4 * n_cir
        labels = np.frombuffer(raw, np.uint8, n_cell, off).copy().reshape(g, g)
        off += n_cell
        toa = np.frombuffer(raw, "<f8", n_cell, off).astype(np.float64).reshape(g, g)
        off += 8 * n_cell
        samples.append(Sample(img, cir, labels, toa, Vec3(x, y, z), route, index))
    norm = np.array([[m_re, m_im], [s_re, s_im]], dtype=np.float32)
    meta.setdefault("g", g)
    meta.setdefault("image_side", H)
    return Dataset(samples, norm, meta)
