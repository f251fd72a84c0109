import warnings

import numpy as np
import pytest

from uavlos import dataset as D
from uavlos.channel import los_labels
from uavlos.errors import DomainError, FormatError, NotFoundError
from uavlos.scene import ScenarioSpec, Snapshot, Vec3, build_scenario
from uavlos.sensing import CameraSpec

from helpers import snapshot_at


def _toy_spec(**kw):
    base = {"template": "crossroad", "seed": 5, "grid": {"side": 60, "g": 6},
            "routes": [{"waypoints": [[20, 130], [180, 130]], "snapshots": 5},
                       {"waypoints": [[100, 20], [100, 240]], "snapshots": 5}]}
    base.update(kw)
    return ScenarioSpec.from_dict(base)


@pytest.fixture(scope="module")
def toy():
    sc = build_scenario(_toy_spec())
    return sc, D.generate_dataset(sc, cam=CameraSpec(resolution=32))


def test_sample_count_and_alignment(toy):
    sc, ds = toy
    assert len(ds) == 10 and ds.routes == [1, 2]
    for s in ds.samples:
        snap = snapshot_at(s.uav_pos, g=6, side=60)
        snap = Snapshot(s.uav_pos, s.route_id, s.snapshot_index, snap.grid)
        assert np.array_equal(los_labels(snap, sc), s.labels)
        assert s.image.shape == (3, 32, 32) and s.cir.shape == (2, 6, 6)


def test_deterministic_bytes(toy, tmp_path):
    sc, ds = toy
    again = D.generate_dataset(build_scenario(_toy_spec()), cam=CameraSpec(resolution=32))
    D.save(ds, tmp_path / "a.snld")
    D.save(again, tmp_path / "b.snld")
    assert (tmp_path / "a.snld").read_bytes() == (tmp_path / "b.snld").read_bytes()


def test_parallel_generation_matches_serial(toy, tmp_path):
    sc, ds = toy
    par = D.generate_dataset(sc, cam=CameraSpec(resolution=32), threads=2)
    D.save(ds, tmp_path / "s.snld")
    D.save(par, tmp_path / "p.snld")
    assert (tmp_path / "s.snld").read_bytes() == (tmp_path / "p.snld").read_bytes()


def test_split_by_route(toy):
    _, ds = toy
    sp = D.split_by_route(ds, 2)
    assert not set(sp.train_ids) & set(sp.test_ids)
    assert len(sp.train_ids) + len(sp.test_ids) == len(ds)
    assert all(ds.samples[i].route_id == 2 for i in sp.test_ids)
    with pytest.raises(NotFoundError):
        D.split_by_route(ds, 9)


def test_single_route_split_warns(toy):
    _, ds = toy
    one = D.Dataset(ds.subset(range(5)), meta=dict(ds.meta))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        sp = D.split_by_route(one, 1)
    assert sp.train_ids == () and w


def test_few_shot_subset(toy):
    _, ds = toy
    sp = D.split_by_route(ds, 2)
    assert D.few_shot_subset(ds, 0, 1, sp.train_ids) == []
    assert sorted(D.few_shot_subset(ds, len(sp.train_ids), 1, sp.train_ids)) == list(sp.train_ids)
    a = D.few_shot_subset(ds, 3, 4, sp.train_ids)
    assert a == D.few_shot_subset(ds, 3, 4, sp.train_ids) and len(set(a)) == 3
    assert set(a) <= set(sp.train_ids)
    with pytest.raises(DomainError):
        D.few_shot_subset(ds, len(sp.train_ids) + 1, 0, sp.train_ids)


def test_normalize_cir(toy):
    _, ds = toy
    sp = D.split_by_route(ds, 2)
    nd = D.normalize_cir(ds, sp)
    train = np.stack([nd.samples[i].cir for i in sp.train_ids]).astype(np.float64)
    assert np.all(np.abs(train.mean(axis=(0, 2, 3))) < 1e-6)
    raw = np.stack([ds.samples[i].cir for i in sp.train_ids]).astype(np.float64)
    mean, std = raw.mean(axis=(0, 2, 3)), raw.std(axis=(0, 2, 3))
    np.testing.assert_allclose(nd.normalization, [mean, std], rtol=1e-6)
    t = sp.test_ids[0]
    np.testing.assert_allclose(nd.samples[t].cir,
                               (ds.samples[t].cir - mean[:, None, None]) / std[:, None, None],
                               rtol=1e-5, atol=1e-5)
    with pytest.raises(DomainError):
        D.normalize_cir(nd, sp)


def test_normalize_constant_channel():
    s = D.Sample(np.zeros((3, 32, 32), np.float32), np.full((2, 3, 3), 2.5, np.float32),
                 np.zeros((3, 3), np.uint8), np.full((3, 3), np.inf), Vec3(0, 0, 50), 1, 0)
    nd = D.normalize_cir(D.Dataset([s, s], meta={"g": 3}), D.Split((0, 1), ()))
    assert np.all(nd.samples[0].cir == 0)


def test_save_load_roundtrip_and_errors(toy, tmp_path):
    _, ds = toy
    path = tmp_path / "toy.snld"
    D.save(ds, path)
    back = D.load(path)
    assert back.meta == ds.meta
    for a, b in zip(ds.samples, back.samples):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.cir.tobytes() == b.cir.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert a.toa.tobytes() == b.toa.tobytes()
        assert (a.uav_pos, a.route_id, a.snapshot_index) == (b.uav_pos, b.route_id, b.snapshot_index)
    raw = path.read_bytes()
    (tmp_path / "bad.snld").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        D.load(tmp_path / "bad.snld")
    (tmp_path / "short.snld").write_bytes(raw[:-7])
    with pytest.raises(FormatError):
        D.load(tmp_path / "short.snld")
    (tmp_path / "ver.snld").write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError):
        D.load(tmp_path / "ver.snld")


def test_empty_dataset_file(tmp_path):
    ds = D.Dataset([], meta={"g": 30, "image_side": 96})
    D.save(ds, tmp_path / "e.snld")
    back = D.load(tmp_path / "e.snld")
    assert len(back) == 0 and back.g == 30
