import json

import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from sgdm.analysis import (REGIONS, RegionMap, WindowPlan, abstraction_correlation, plot_curve, project_2d,
                           region_subset, save_curve, window_slice)
from sgdm.data import EEGEpoch, StimulusRecord
from sgdm.errors import IntegrityError, InvalidInput
from sgdm.metrics import MetricReport
from sgdm.synth import default_channel_names


def epoch(seed=0):
    data = np.random.default_rng(seed).normal(size=(64, 250))
    return EEGEpoch(data, 250.0, default_channel_names(), "sub-01", "stim-0000")


def test_window_full_span_identity():
    e = epoch()
    w = window_slice(e, (0, 1000))
    assert np.array_equal(w.data, e.data) and w.t0_offset == 0.0


def test_window_sample_count_and_offset():
    w = window_slice(epoch(), (0, 200))
    assert w.n_samples == 50
    w2 = window_slice(epoch(), (300, 500))
    assert w2.n_samples == 50 and w2.t0_offset == pytest.approx(300.0)
    assert np.array_equal(w2.data, epoch().data[:, 75:125])


def test_window_partition():
    e = epoch()
    a, b = window_slice(e, (0, 500)), window_slice(e, (500, 1000))
    assert np.array_equal(np.concatenate([a.data, b.data], axis=1), window_slice(e, (0, 1000)).data)


def test_window_bounds():
    with pytest.raises(InvalidInput):
        window_slice(epoch(), (-100, 200))
    with pytest.raises(InvalidInput):
        window_slice(epoch(), (900, 1100))
    with pytest.raises(InvalidInput):
        window_slice(epoch(), (300, 300))


def test_region_map_default():
    rm = RegionMap.load()
    assert set(rm.names) == set(REGIONS)
    sizes = {k: len(v) for k, v in rm.regions.items()}
    assert sizes == {"frontal": 12, "central": 14, "parietal": 14, "temporal": 14, "occipital": 10}
    e = epoch()
    assert region_subset(e, "occipital", rm).n_channels == 10


def test_region_disjoint_cover_and_order():
    rm = RegionMap.load()
    e = epoch()
    seen = []
    for name in rm.names:
        sub = region_subset(e, name, rm)
        idx = [e.channel_names.index(ch) for ch in sub.channel_names]
        assert idx == sorted(idx)
        assert np.array_equal(sub.data, e.data[idx])
        seen += sub.channel_names
    assert sorted(seen) == sorted(rm.channels()) and len(seen) == len(set(seen))


def test_region_errors(tmp_path):
    rm = RegionMap.load()
    with pytest.raises(InvalidInput):
        region_subset(epoch(), "cerebellum", rm)
    with pytest.raises(InvalidInput):
        RegionMap({"a": ["Fz", "Cz"], "b": ["Cz"]})
    with pytest.raises(InvalidInput):
        RegionMap({"a": []})
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"regions": {"x": ["Fz"], "y": ["Cz", "Pz"]}}))
    assert RegionMap.load(path).names == ("x", "y")


def test_window_plans():
    sliding = WindowPlan("sliding", 200, 100).windows()
    assert sliding[0] == (0, 200) and sliding[-1] == (800, 1000) and len(sliding) == 9
    cum = WindowPlan("cumulative", stride=250).windows()
    assert cum == [(0.0, 250.0), (0.0, 500.0), (0.0, 750.0), (0.0, 1000.0)]
    assert WindowPlan("cumulative", endpoints=[100, 600]).windows() == [(0.0, 100.0), (0.0, 600.0)]
    assert WindowPlan("sliding", 1000, 100).windows() == [(0, 1000)]
    with pytest.raises(InvalidInput):
        WindowPlan("sliding", 0, 100)
    with pytest.raises(InvalidInput):
        WindowPlan("cumulative", endpoints=[1200]).windows()


def stimuli_with_levels(levels):
    img, code = np.ones((3, 16, 16)), np.zeros((7, 7))
    return [StimulusRecord(f"s{i}", img, ("x",), code, a) for i, a in enumerate(levels)]


def report_from(values):
    rep = MetricReport()
    for i, v in enumerate(values):
        rep.add(f"s{i}", "sub-01", {"clip": v})
        rep.add(f"s{i}", "sub-02", {"clip": v})
    return rep


def test_abstraction_linear_fixture():
    levels = np.linspace(0, 1, 12)
    r, _ = abstraction_correlation(report_from(-levels), stimuli_with_levels(levels))
    assert r == pytest.approx(-1.0, abs=1e-12)


def test_abstraction_permutation_null():
    rng = np.random.default_rng(0)
    levels = rng.random(40)
    ps = []
    for seed in range(15):
        sims = np.random.default_rng(seed).permutation(-levels)
        ps.append(abstraction_correlation(report_from(sims), stimuli_with_levels(levels))[1])
    assert np.median(ps) > 0.05


def test_abstraction_missing_level():
    stimuli = stimuli_with_levels([0.1, 0.5, 0.9])[:2]
    with pytest.raises(IntegrityError):
        abstraction_correlation(report_from([0.3, 0.2, 0.1]), stimuli)


def test_project_2d_properties():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(20, 8))
    b = rng.normal(size=(20, 8)) + 10.0
    x = np.concatenate([a, b, a[:1]])
    y = project_2d(x, seed=3)
    assert y.shape == (41, 2) and np.all(np.isfinite(y))
    assert np.array_equal(y, project_2d(x, seed=3))
    spread = np.ptp(y, axis=0).max()
    assert np.linalg.norm(y[0] - y[40]) < 0.01 * spread
    labels = np.array([0] * 20 + [1] * 20 + [0])
    assert silhouette_score(y, labels) > 0.5
    with pytest.raises(InvalidInput):
        project_2d(rng.normal(size=(4, 8)))


def test_curve_io(tmp_path):
    curve = [{"label": [0, 200], "mean": 0.1, "sem": 0.01, "n": 5},
             {"label": [100, 300], "mean": 0.2, "sem": 0.02, "n": 5}]
    p = save_curve(tmp_path / "c.json", curve, {"mode": "sliding"})
    assert json.loads(p.read_text())["curve"] == curve
    assert plot_curve(tmp_path / "c.png", curve, "window centre (ms)").stat().st_size > 0
