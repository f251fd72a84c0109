"""Procedural urban scenarios, UAV trajectories and the ground receiver grid.

Two templates are provided:

* ``crossroad``: 200 x 260 m, three north-south and three east-west streets,
  19 buildings placed in the blocks between them (buildings never touch a
  street corridor).
* ``wide_lane``: same footprint, one broad north-south avenue plus narrow side
  streets and a denser building layout.

All geometry is axis-aligned; x points east, y points north, z up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, NamedTuple, Sequence

import numpy as np
import yaml

from .errors import ConfigError, NotFoundError


class Vec3(NamedTuple):
    x: float
    y: float
    z: float

    def __array__(self, dtype=None, copy=None):
        return np.array((self.x, self.y, self.z), dtype=dtype or np.float64)

    @classmethod
    def of(cls, v: Sequence[float]) -> "Vec3":
        x, y, z = (float(c) for c in v)
        return cls(x, y, z)


@dataclass(frozen=True)
class Building:
    min_corner: Vec3
    max_corner: Vec3
    height_color_id: int

    def __post_init__(self):
        lo, hi = np.asarray(self.min_corner), np.asarray(self.max_corner)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ConfigError("building corners must be finite")
        if not np.all(lo < hi):
            raise ConfigError(f"building min corner {lo} not below max corner {hi}")
        if lo[2] != 0.0:
            raise ConfigError("buildings must stand on the ground plane (min z = 0)")

    @property
    def height(self) -> float:
        return self.max_corner.z

    def contains_xy(self, x: float, y: float) -> bool:
        return (self.min_corner.x <= x <= self.max_corner.x
                and self.min_corner.y <= y <= self.max_corner.y)


@dataclass(frozen=True)
class Rect:
    """Ground-plane rectangle, used for street corridors."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float


@dataclass(frozen=True)
class Trajectory:
    id: int
    waypoints: tuple[Vec3, ...]
    snapshot_count: int

    def __post_init__(self):
        if not self.waypoints:
            raise ConfigError(f"route {self.id} has no waypoints")
        if self.snapshot_count < 1:
            raise ConfigError(f"route {self.id}: snapshot_count must be >= 1")
        zs = {w.z for w in self.waypoints}
        if len(zs) != 1:
            raise ConfigError(f"route {self.id}: waypoints must share one altitude")

    @property
    def altitude(self) -> float:
        return self.waypoints[0].z


@dataclass(frozen=True)
class RxGrid:
    center: Vec3
    side: float = 150.0
    g: int = 30

    def __post_init__(self):
        if self.g < 2:
            raise ConfigError("grid dimension g must be >= 2")
        if self.side <= 0:
            raise ConfigError("grid side must be positive")
        if self.center.z != 0.0:
            raise ConfigError("grid center must lie on the ground (z = 0)")

    @property
    def spacing(self) -> float:
        return self.side / (self.g - 1)


@dataclass(frozen=True)
class Snapshot:
    uav_pos: Vec3
    route_id: int
    index: int
    grid: RxGrid


@dataclass(frozen=True)
class Scenario:
    name: str
    extent: tuple[float, float]
    buildings: tuple[Building, ...]
    routes: tuple[Trajectory, ...]
    rng_seed: int
    streets: tuple[Rect, ...] = ()
    grid_side: float = 150.0
    grid_g: int = 30

    @property
    def max_height(self) -> float:
        return max((b.height for b in self.buildings), default=0.0)

    def route(self, route_id: int) -> Trajectory:
        for r in self.routes:
            if r.id == route_id:
                return r
        raise NotFoundError(f"route {route_id} not in scenario {self.name!r}")

    def boxes(self) -> np.ndarray:
        """Building AABBs as a (K, 2, 3) float64 array of (min, max) corners."""
        if not self.buildings:
            return np.zeros((0, 2, 3))
        return np.array([[b.min_corner, b.max_corner] for b in self.buildings], dtype=np.float64)

    def with_altitude(self, altitude: float) -> "Scenario":
        """Copy of the scenario with every route moved to ``altitude``."""
        routes = tuple(
            Trajectory(r.id, tuple(Vec3(w.x, w.y, float(altitude)) for w in r.waypoints),
                       r.snapshot_count)
            for r in self.routes)
        return Scenario(self.name, self.extent, self.buildings, routes, self.rng_seed,
                        self.streets, self.grid_side, self.grid_g)


# ---------------------------------------------------------------------------
# templates

@dataclass(frozen=True)
class _Template:
    extent: tuple[float, float]
    # (center as a fraction of extent, width in m)
    vertical_streets: tuple[tuple[float, float], ...]
    horizontal_streets: tuple[tuple[float, float], ...]
    building_count: int
    height_range: tuple[float, float]
    altitude: float
    # waypoints as fractions of the extent
    routes: tuple[tuple[tuple[float, float], ...], ...]


_TEMPLATES: dict[str, _Template] = {
    "crossroad": _Template(
        extent=(200.0, 260.0),
        vertical_streets=((0.18, 14.0), (0.5, 14.0), (0.82, 14.0)),
        horizontal_streets=((0.18, 14.0), (0.5, 14.0), (0.82, 14.0)),
        building_count=19,
        height_range=(8.0, 32.0),
        altitude=63.3,
        routes=(
            ((0.18, 0.04), (0.18, 0.96)),
            ((0.05, 0.5), (0.95, 0.5)),
            ((0.82, 0.96), (0.82, 0.04)),
            ((0.08, 0.06), (0.92, 0.94)),
            ((0.95, 0.18), (0.5, 0.18), (0.5, 0.92)),
            ((0.08, 0.94), (0.92, 0.06)),
            ((0.05, 0.82), (0.95, 0.82)),
        ),
    ),
    "wide_lane": _Template(
        extent=(200.0, 260.0),
        vertical_streets=((0.2, 8.0), (0.5, 30.0), (0.8, 8.0)),
        horizontal_streets=((0.25, 8.0), (0.5, 8.0), (0.75, 8.0)),
        building_count=36,
        height_range=(15.0, 90.0),
        altitude=200.0,
        routes=(
            ((0.5, 0.04), (0.5, 0.96)),
            ((0.2, 0.96), (0.2, 0.04)),
            ((0.8, 0.04), (0.8, 0.96)),
            ((0.05, 0.25), (0.95, 0.25)),
            ((0.95, 0.5), (0.05, 0.5)),
            ((0.05, 0.75), (0.95, 0.75)),
            ((0.1, 0.1), (0.9, 0.9)),
            ((0.1, 0.9), (0.9, 0.1)),
            ((0.35, 0.06), (0.35, 0.6), (0.65, 0.94)),
        ),
    ),
}

TEMPLATE_NAMES = tuple(_TEMPLATES)


@dataclass
class RouteSpec:
    waypoints: list[tuple[float, ...]]
    snapshots: int = 10


@dataclass
class ScenarioSpec:
    """Declarative scenario description (the structured text config).

    Keys: ``template``, ``extent``, ``building_count``, ``seed``, ``altitude``,
    ``routes[].waypoints``, ``routes[].snapshots``, ``grid.side``, ``grid.g``.
    Routes default to the template's route set with ``snapshots_per_route``
    snapshots each.
    """

    template: str = "crossroad"
    seed: int = 0
    extent: tuple[float, float] | None = None
    building_count: int | None = None
    altitude: float | None = None
    routes: list[RouteSpec] | None = None
    snapshots_per_route: int = 10
    grid_side: float = 150.0
    grid_g: int = 30
    street_width: float | None = None

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScenarioSpec":
        d = dict(d)
        known = {"template", "seed", "extent", "building_count", "altitude", "routes",
                 "snapshots_per_route", "grid", "street_width"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        grid = d.pop("grid", None) or {}
        routes = d.pop("routes", None)
        spec = cls(**d)
        if routes is not None:
            try:
                spec.routes = [RouteSpec([tuple(map(float, w)) for w in r["waypoints"]],
                                         int(r.get("snapshots", spec.snapshots_per_route)))
                               for r in routes]
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad route entry: {exc}") from exc
        if spec.extent is not None:
            spec.extent = tuple(float(v) for v in spec.extent)  # type: ignore[assignment]
        spec.grid_side = float(grid.get("side", spec.grid_side))
        spec.grid_g = int(grid.get("g", spec.grid_g))
        return spec

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioSpec":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


def _corridors(centers: Sequence[tuple[float, float]], length: float, axis_len: float,
               vertical: bool) -> list[Rect]:
    rects = []
    for frac, width in centers:
        c = frac * axis_len
        lo, hi = c - width / 2, c + width / 2
        if width <= 0 or lo < 0 or hi > axis_len:
            raise ConfigError(f"street corridor at {c:.1f} m (width {width}) leaves the extent")
        rects.append(Rect(lo, 0.0, hi, length) if vertical else Rect(0.0, lo, length, hi))
    spans = sorted((r.xmin, r.xmax) if vertical else (r.ymin, r.ymax) for r in rects)
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        if b0 <= a1:
            raise ConfigError("street corridors overlap")
    return rects


def _gaps(spans: list[tuple[float, float]], total: float) -> list[tuple[float, float]]:
    out, cursor = [], 0.0
    for lo, hi in sorted(spans):
        if lo > cursor:
            out.append((cursor, lo))
        cursor = max(cursor, hi)
    if cursor < total:
        out.append((cursor, total))
    return out


_MIN_LOT = 6.0
_LOT_GAP = 3.0


def _place_buildings(blocks: list[Rect], n: int, height_range: tuple[float, float],
                     rng: np.random.Generator) -> list[Building]:
    if n == 0:
        return []
    counts = np.full(len(blocks), n // len(blocks), dtype=int)
    extra = rng.permutation(len(blocks))[: n % len(blocks)]
    counts[extra] += 1
    buildings: list[Building] = []
    for block, m in zip(blocks, counts):
        if m == 0:
            continue
        w, d = block.xmax - block.xmin, block.ymax - block.ymin
        split_x = w >= d
        span = w if split_x else d
        lot = (span - (m - 1) * _LOT_GAP) / m
        if lot < _MIN_LOT or min(w, d) < _MIN_LOT:
            raise ConfigError(f"building_count {n} too large for the block layout")
        for k in range(m):
            a0 = (block.xmin if split_x else block.ymin) + k * (lot + _LOT_GAP)
            a1 = a0 + lot
            if split_x:
                x0, x1, y0, y1 = a0, a1, block.ymin, block.ymax
            else:
                x0, x1, y0, y1 = block.xmin, block.xmax, a0, a1
            # random setbacks keep at least half of each lot dimension
            sx = rng.uniform(1.0, min(6.0, (x1 - x0) / 4), size=2)
            sy = rng.uniform(1.0, min(6.0, (y1 - y0) / 4), size=2)
            h = round(float(rng.uniform(*height_range)), 1)
            buildings.append(Building(
                Vec3(round(x0 + sx[0], 2), round(y0 + sy[0], 2), 0.0),
                Vec3(round(x1 - sx[1], 2), round(y1 - sy[1], 2), h),
                height_color_id=len(buildings)))
    return buildings


def build_scenario(spec: ScenarioSpec) -> Scenario:
    """Build a deterministic scenario from ``spec`` (same spec and seed, same geometry)."""
    if spec.template not in _TEMPLATES:
        raise ConfigError(f"unknown template {spec.template!r}; expected one of {TEMPLATE_NAMES}")
    tpl = _TEMPLATES[spec.template]
    width, depth = spec.extent if spec.extent is not None else tpl.extent
    if not (width > 0 and depth > 0 and math.isfinite(width) and math.isfinite(depth)):
        raise ConfigError(f"invalid extent {(width, depth)}")
    n = tpl.building_count if spec.building_count is None else int(spec.building_count)
    if n < 0:
        raise ConfigError("building_count must be >= 0")
    altitude = tpl.altitude if spec.altitude is None else float(spec.altitude)

    vs = tpl.vertical_streets
    hs = tpl.horizontal_streets
    if spec.street_width is not None:
        vs = tuple((f, float(spec.street_width)) for f, _ in vs)
        hs = tuple((f, float(spec.street_width)) for f, _ in hs)
    vrects = _corridors(vs, depth, width, vertical=True)
    hrects = _corridors(hs, width, depth, vertical=False)
    xs = _gaps([(r.xmin, r.xmax) for r in vrects], width)
    ys = _gaps([(r.ymin, r.ymax) for r in hrects], depth)
    blocks = [Rect(x0, y0, x1, y1) for (y0, y1) in ys for (x0, x1) in xs]

    rng = np.random.default_rng(spec.seed)
    lo_h, hi_h = tpl.height_range
    hi_h = min(hi_h, 0.9 * altitude)
    if hi_h <= lo_h:
        raise ConfigError(f"altitude {altitude} m too low for template building heights")
    buildings = _place_buildings(blocks, n, (lo_h, hi_h), rng)

    if spec.routes is not None:
        routes = []
        for i, r in enumerate(spec.routes, start=1):
            wps = []
            for w in r.waypoints:
                if len(w) == 2:
                    wps.append(Vec3(w[0], w[1], altitude))
                elif len(w) == 3:
                    wps.append(Vec3.of(w))
                else:
                    raise ConfigError(f"route {i}: waypoints need 2 or 3 coordinates")
            routes.append(Trajectory(i, tuple(wps), r.snapshots))
    else:
        routes = [Trajectory(i, tuple(Vec3(fx * width, fy * depth, altitude) for fx, fy in wps),
                             spec.snapshots_per_route)
                  for i, wps in enumerate(tpl.routes, start=1)]
    if not routes:
        raise ConfigError("scenario needs at least one route")
    for r in routes:
        for w in r.waypoints:
            if not (0 <= w.x <= width and 0 <= w.y <= depth):
                raise ConfigError(f"route {r.id} waypoint {tuple(w)} outside the extent")
    return Scenario(
        name=spec.template, extent=(float(width), float(depth)), buildings=tuple(buildings),
        routes=tuple(routes), rng_seed=int(spec.seed), streets=tuple(vrects + hrects),
        grid_side=float(spec.grid_side), grid_g=int(spec.grid_g))


def trajectory_snapshots(scenario: Scenario, route_id: int) -> list[Snapshot]:
    """Snapshots spaced uniformly by arc length along the route polyline."""
    route = scenario.route(route_id)
    pts = np.array(route.waypoints, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    n = route.snapshot_count
    targets = np.zeros(1) if n == 1 else np.linspace(0.0, cum[-1], n)
    out = []
    for i, s in enumerate(targets):
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        if len(seg) == 0 or seg[k] == 0.0:
            p = pts[0] if len(seg) == 0 else pts[k]
        else:
            p = pts[k] + (s - cum[k]) / seg[k] * (pts[k + 1] - pts[k])
        pos = Vec3(float(p[0]), float(p[1]), route.altitude)
        top = max((b.height for b in scenario.buildings if b.contains_xy(pos.x, pos.y)),
                  default=0.0)
        if pos.z <= top:
            raise ConfigError(f"route {route_id} snapshot {i}: UAV at {pos.z} m "
                              f"not above building of height {top} m")
        grid = RxGrid(Vec3(pos.x, pos.y, 0.0), scenario.grid_side, scenario.grid_g)
        out.append(Snapshot(pos, route.id, i, grid))
    return out


def all_snapshots(scenario: Scenario) -> list[Snapshot]:
    return [s for r in scenario.routes for s in trajectory_snapshots(scenario, r.id)]


def rx_positions(grid: RxGrid) -> np.ndarray:
    """Receiver coordinates as a (g*g, 3) array, flat index ``r * g + c``.

    Row ``r`` runs north to south and column ``c`` west to east, so the
    layout matches a top-down image whose pixel (0, 0) is the north-west
    corner.
    """
    offs = np.linspace(-grid.side / 2, grid.side / 2, grid.g)
    xs = grid.center.x + offs              # columns, west -> east
    ys = grid.center.y - offs              # rows, north -> south
    X, Y = np.meshgrid(xs, ys)             # (row, col)
    return np.stack([X.ravel(), Y.ravel(), np.zeros(grid.g * grid.g)], axis=1)
