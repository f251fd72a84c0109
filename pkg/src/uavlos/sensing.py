"""Synthetic nadir camera.

The renderer is orthographic: every pixel covers a fixed square of ground,
so pixel (i, j) lines up with receiver (r, c) of the grid underneath. Roof
pixels carry the normalised building height in channel 0 and a per-building
tint in channels 1-2, standing in for the height cues (shadows, facades) of
a real photograph.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError
from .scene import Scenario, Snapshot

GROUND = (0.5, 0.5, 0.5)
STREET = (0.2, 0.2, 0.2)
MIN_RESOLUTION = 32


@dataclass(frozen=True)
class CameraSpec:
    # ground coverage in m; None -> one grid spacing wider than the Rx grid
    footprint_side: float | None = None
    resolution: int = 96

    def __post_init__(self):
        if self.resolution < MIN_RESOLUTION:
            raise ConfigError(f"camera resolution must be >= {MIN_RESOLUTION}")
        if self.footprint_side is not None and self.footprint_side <= 0:
            raise ConfigError("camera footprint must be positive")

    def footprint_for(self, grid_side: float, g: int) -> float:
        if self.footprint_side is None:
            return grid_side * g / (g - 1)
        if self.footprint_side < grid_side:
            raise ConfigError(f"camera footprint {self.footprint_side} m smaller than "
                              f"grid side {grid_side} m")
        return self.footprint_side


@dataclass(frozen=True)
class Image:
    data: np.ndarray          # (3, H, H) float32 in [0, 1]
    meters_per_pixel: float

    @property
    def resolution(self) -> int:
        return self.data.shape[-1]


def building_tint(color_id: int) -> tuple[float, float]:
    """Deterministic (channel 1, channel 2) tint for a building id."""
    golden = 0.6180339887498949
    a = (color_id * golden) % 1.0
    b = (color_id * golden * golden + 0.5) % 1.0
    return 0.25 + 0.5 * a, 0.25 + 0.5 * b


def render(snapshot: Snapshot, scenario: Scenario, cam: CameraSpec = CameraSpec()) -> Image:
    """Top-down raster of the ground square centred at the UAV nadir.

    Pixel (0, 0) is the north-west corner; rows run south, columns east.
    """
    grid = snapshot.grid
    side = cam.footprint_for(grid.side, grid.g)
    n = cam.resolution
    mpp = side / n
    cx, cy = snapshot.uav_pos.x, snapshot.uav_pos.y
    xs = cx - side / 2 + (np.arange(n) + 0.5) * mpp          # column centres
    ys = cy + side / 2 - (np.arange(n) + 0.5) * mpp          # row centres
    img = np.empty((3, n, n), dtype=np.float64)
    img[:] = np.array(GROUND)[:, None, None]

    for st in scenario.streets:
        rows = (ys >= st.ymin) & (ys <= st.ymax)
        cols = (xs >= st.xmin) & (xs <= st.xmax)
        img[:, rows[:, None] & cols[None, :]] = np.array(STREET)[:, None]

    hmax = scenario.max_height
    # taller buildings drawn last so they win where footprints overlap
    for b in sorted(scenario.buildings, key=lambda b: b.height):
        rows = (ys >= b.min_corner.y) & (ys <= b.max_corner.y)
        cols = (xs >= b.min_corner.x) & (xs <= b.max_corner.x)
        if not (rows.any() and cols.any()):
            continue
        mask = rows[:, None] & cols[None, :]
        t1, t2 = building_tint(b.height_color_id)
        img[:, mask] = np.array([b.height / hmax, t1, t2])[:, None]
    return Image(img.astype(np.float32), mpp)


def add_gaussian_noise(img: Image, variance: float, seed: int, clamp: bool = True) -> Image:
    """Add i.i.d. zero-mean Gaussian noise of the given variance, then clamp to [0, 1]."""
    if variance < 0:
        raise DomainError("noise variance must be non-negative")
    if variance == 0:
        return Image(img.data.copy(), img.meters_per_pixel)
    rng = np.random.default_rng(seed)
    noisy = img.data.astype(np.float64) + rng.normal(0.0, np.sqrt(variance), img.data.shape)
    if clamp:
        noisy = np.clip(noisy, 0.0, 1.0)
    return Image(noisy.astype(np.float32), img.meters_per_pixel)


def pixel_of(point_xy: tuple[float, float], snapshot: Snapshot, img: Image) -> tuple[int, int]:
    """(row, col) of the pixel containing a ground point."""
    half = img.resolution * img.meters_per_pixel / 2
    col = int(np.floor((point_xy[0] - (snapshot.uav_pos.x - half)) / img.meters_per_pixel))
    row = int(np.floor(((snapshot.uav_pos.y + half) - point_xy[1]) / img.meters_per_pixel))
    return row, col


def write_ppm(img: Image, path: str | Path) -> None:
    """Binary PPM (P6, 8-bit)."""
    h, w = img.data.shape[1:]
    rgb = np.clip(np.rint(img.data.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a P6 file written by :func:`write_ppm` as an (H, W, 3) uint8 array."""
    raw = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PPM")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    return np.frombuffer(raw[m.end(): m.end() + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
