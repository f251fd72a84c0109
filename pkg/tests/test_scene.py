import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uavlos.errors import ConfigError, NotFoundError
from uavlos.scene import (RxGrid, ScenarioSpec, Vec3, all_snapshots, build_scenario, rx_positions,
                          trajectory_snapshots)


def _inside(rect, x, y):
    return rect.xmin < x < rect.xmax and rect.ymin < y < rect.ymax


def test_crossroad_seed_determinism_and_streets_clear():
    a = build_scenario(ScenarioSpec(template="crossroad", seed=7))
    b = build_scenario(ScenarioSpec(template="crossroad", seed=7))
    assert a == b
    np.testing.assert_array_equal(a.boxes(), b.boxes())
    for bld in a.buildings:
        lo, hi = bld.min_corner, bld.max_corner
        for st_ in a.streets:
            overlap_x = lo.x < st_.xmax and hi.x > st_.xmin
            overlap_y = lo.y < st_.ymax and hi.y > st_.ymin
            assert not (overlap_x and overlap_y)


def test_crossroad_has_19_buildings_inside_extent():
    sc = build_scenario(ScenarioSpec(template="crossroad", seed=0))
    assert sc.extent == (200.0, 260.0)
    assert len(sc.buildings) == 19
    boxes = sc.boxes()
    assert np.all(boxes[:, 0, :2] >= 0)
    assert np.all(boxes[:, 1, 0] <= 200) and np.all(boxes[:, 1, 1] <= 260)
    assert len(sc.routes) == 7


def test_wide_lane_is_denser():
    cr = build_scenario(ScenarioSpec(template="crossroad", seed=0))
    wl = build_scenario(ScenarioSpec(template="wide_lane", seed=0))
    assert len(wl.buildings) > len(cr.buildings)
    assert len(wl.routes) == 9
    assert wl.routes[0].altitude == 200.0


def test_zero_buildings_is_open_field():
    sc = build_scenario(ScenarioSpec(template="crossroad", building_count=0))
    assert sc.buildings == () and sc.boxes().shape == (0, 2, 3)


def test_different_seeds_differ():
    a = build_scenario(ScenarioSpec(seed=1)).boxes()
    b = build_scenario(ScenarioSpec(seed=2)).boxes()
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("bad", [
    {"extent": (-5, 100)},
    {"extent": (200, 260), "street_width": 200.0},
    {"template": "suburb"},
    {"routes": [{"waypoints": [[10, 10], [500, 10]]}]},
])
def test_invalid_specs(bad):
    with pytest.raises(ConfigError):
        build_scenario(ScenarioSpec.from_dict(bad))


def test_unknown_spec_key():
    with pytest.raises(ConfigError):
        ScenarioSpec.from_dict({"templat": "crossroad"})


def test_spec_from_dict_keys():
    spec = ScenarioSpec.from_dict({
        "template": "crossroad", "seed": 3, "extent": [200, 260], "building_count": 19,
        "routes": [{"waypoints": [[20, 130], [180, 130]], "snapshots": 4}],
        "grid": {"side": 100, "g": 10}})
    sc = build_scenario(spec)
    assert sc.grid_side == 100 and sc.grid_g == 10
    assert sc.routes[0].snapshot_count == 4 and sc.routes[0].altitude == 63.3


def test_uniform_snapshot_spacing():
    spec = ScenarioSpec.from_dict({"building_count": 0,
                                   "routes": [{"waypoints": [[10, 20], [110, 20]], "snapshots": 3}]})
    snaps = trajectory_snapshots(build_scenario(spec), 1)
    assert [s.uav_pos.x for s in snaps] == pytest.approx([10, 60, 110])
    one = ScenarioSpec.from_dict({"building_count": 0,
                                  "routes": [{"waypoints": [[10, 20], [110, 20]], "snapshots": 1}]})
    (s,) = trajectory_snapshots(build_scenario(one), 1)
    assert (s.uav_pos.x, s.uav_pos.y) == (10, 20)


def test_altitude_and_nadir_alignment():
    sc = build_scenario(ScenarioSpec(template="crossroad", snapshots_per_route=4))
    for s in all_snapshots(sc):
        assert s.uav_pos.z == 63.3
        assert (s.grid.center.x, s.grid.center.y) == (s.uav_pos.x, s.uav_pos.y)


def test_unknown_route():
    sc = build_scenario(ScenarioSpec())
    with pytest.raises(NotFoundError):
        trajectory_snapshots(sc, 99)


def test_rx_positions_examples():
    pts = rx_positions(RxGrid(Vec3(0, 0, 0), 10.0, 2))
    assert {tuple(p) for p in pts} == {(-5, -5, 0), (-5, 5, 0), (5, -5, 0), (5, 5, 0)}
    big = rx_positions(RxGrid(Vec3(3, 4, 0), 150.0, 30))
    assert big.shape == (900, 3) and np.all(big[:, 2] == 0)


def test_rx_positions_row_major_north_to_south():
    pts = rx_positions(RxGrid(Vec3(0, 0, 0), 20.0, 3))
    # flat index r*g + c: rows run north to south, columns west to east
    assert tuple(pts[0]) == (-10, 10, 0)
    assert tuple(pts[2]) == (10, 10, 0)
    assert tuple(pts[3 * 2 + 0]) == (-10, -10, 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.integers(2, 12), st.floats(1.0, 300.0))
def test_grid_translation_equivariance(tx, ty, g, side):
    base = rx_positions(RxGrid(Vec3(0, 0, 0), side, g))
    moved = rx_positions(RxGrid(Vec3(tx, ty, 0), side, g))
    np.testing.assert_allclose(moved, base + np.array([tx, ty, 0]), atol=1e-9)
