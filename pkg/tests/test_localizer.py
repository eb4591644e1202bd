import datetime as dt

import numpy as np
import pytest

from lightloc.astro import SynthConfig, day_length_hours, synth_light, synth_temp
from lightloc.geo import GeoCoord, LikelihoodMap, SearchGrid, argmax_map, make_coarse_grid
from lightloc.localizer import (
    BASELINE_HORIZON_DEG,
    Libraries,
    Localizer,
    LocalizationResult,
    Models,
    ScoredReference,
    baseline_longitude,
    cell_average,
    fill_empty_cells,
    flat_region_width,
    score_references,
    threshold_baseline,
    threshold_events,
)
from lightloc.prep import log_light
from lightloc.reflib import ReferenceLibrary, SyntheticStationClient, build_temp_reference
from lightloc.siamese import SiameseModel

GRID = make_coarse_grid()
SMALL = SearchGrid(0.0, 1.0, 3, 0.0, 1.0, 3)


class TestCellAverage:
    def test_single_ref_at_center(self):
        m = cell_average([ScoredReference(GeoCoord(40.0, -90.0), 0.7)], GRID)
        i, j = 40 - 27, -90 + 122
        assert m.mask.sum() == 1 and m.mask[i, j]
        assert m.values[i, j] == 0.7

    def test_off_center_ref(self):
        m = cell_average([ScoredReference(GeoCoord(40.5, -90.5), 0.2)], GRID)
        assert m.mask.sum() == 4
        np.testing.assert_array_equal(m.values[m.mask], 0.2)

    def test_strict_boundary(self):
        m = cell_average([ScoredReference(GeoCoord(40.0, -89.0), 1.0)], GRID)
        # exactly 1 degree from cell (40, -90): excluded
        assert not m.mask[13, 32] and m.mask[13, 33]

    def test_mean(self):
        m = cell_average([ScoredReference(GeoCoord(40.0, -90.0), 0.2),
                          ScoredReference(GeoCoord(40.3, -90.2), 0.6)], GRID)
        assert m.values[13, 32] == pytest.approx(0.4)

    def test_matches_bruteforce(self, rng):
        refs = [ScoredReference(GeoCoord(float(rng.uniform(26, 49)), float(rng.uniform(-123, -65))),
                                float(rng.uniform())) for _ in range(300)]
        m = cell_average(refs, GRID)
        for i, lat in enumerate(GRID.lats):
            for j, lon in enumerate(GRID.lons):
                hits = [r.prob for r in refs if abs(r.coord.lat - lat) < 1 and abs(r.coord.lon - lon) < 1]
                assert m.mask[i, j] == bool(hits)
                if hits:
                    assert m.values[i, j] == pytest.approx(np.mean(hits), rel=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            cell_average([], GRID)


class TestFill:
    def test_unchanged_when_full(self, rng):
        m = LikelihoodMap(SMALL, rng.uniform(size=(3, 3)))
        np.testing.assert_array_equal(fill_empty_cells(m).values, m.values)

    def test_midpoint(self):
        v = np.array([[0.2, 0, 0], [0, 0, 0], [0.4, 0, 0]])
        mask = np.zeros((3, 3), bool)
        mask[0, 0] = mask[2, 0] = True
        mask[:, 1:] = True
        out = fill_empty_cells(LikelihoodMap(SMALL, v, mask))
        assert out.values[1, 0] == pytest.approx(0.3)
        assert not out.mask[1, 0]

    def test_corner(self):
        mask = np.zeros((3, 3), bool)
        mask[1, 0] = True
        mask[:, 1:] = True
        v = np.where(mask, 0.5, 0.0)
        v[1, 0] = 0.9
        out = fill_empty_cells(LikelihoodMap(SMALL, v, mask))
        assert out.values[0, 0] == 0.9 and out.values[2, 0] == 0.9

    def test_empty_column_idw(self):
        mask = np.zeros((3, 3), bool)
        mask[:, 0] = True
        v = np.where(mask, 0.6, 0.0)
        out = fill_empty_cells(LikelihoodMap(SMALL, v, mask))
        np.testing.assert_allclose(out.values, 0.6)

    def test_all_masked(self):
        with pytest.raises(ValueError):
            fill_empty_cells(LikelihoodMap(SMALL, np.zeros((3, 3)), np.zeros((3, 3), bool)))


D = dt.date(2019, 10, 15)
CFG = SynthConfig("none", 0.0, rng_seed=1, weather_seed=1)


@pytest.fixture(scope="module")
def temp_setup():
    cells = make_coarse_grid().centers()
    lib, _ = build_temp_reference(cells, [D], SyntheticStationClient(cells, CFG))
    model = SiameseModel.create("temperature", seed=0)
    model.sigma = 0.05
    return model, lib


class TestScoring:
    def test_identical_ref_wins(self, temp_setup):
        model, lib = temp_setup
        target = lib.records[100]
        scored = score_references(model, target, lib, np.arange(lib.n_parents))
        probs = np.array([s.prob for s in scored])
        assert int(np.argmax(probs)) == 100 and abs(probs.sum() - 1) < 1e-12

    def test_equal_refs_uniform(self, clear_cfg):
        lib = ReferenceLibrary("light")
        for _ in range(4):
            lib.add(log_light(synth_light(GeoCoord(40, -90), D, clear_cfg)))
        model = SiameseModel.create("light", seed=0)
        model.sigma = 1.0
        target = log_light(synth_light(GeoCoord(35, -100), D, clear_cfg))
        probs = [s.prob for s in score_references(model, target, lib, np.arange(4))]
        np.testing.assert_allclose(probs, 0.25, rtol=1e-12)

    def test_empty(self, temp_setup):
        model, lib = temp_setup
        with pytest.raises(ValueError):
            score_references(model, lib.records[0], lib, [])

    def test_self_match_top_decile(self, temp_setup):
        model, lib = temp_setup
        loc = Localizer(Models(temp=model), Libraries(temp=lib))
        target = lib.records[300]
        m = loc.temp_map(target)
        assert abs(m.total - 1) < 1e-9
        v = m.value_at(target.coord)
        assert v >= np.quantile(m.values, 0.9)

    def test_degraded_single_modality(self, temp_setup):
        model, lib = temp_setup
        loc = Localizer(Models(temp=model), Libraries(temp=lib))
        res = loc.fused(None, lib.records[5], D)
        assert res.degraded and res.light_map is None
        assert res.estimate == argmax_map(res.fused_map)
        js = res.to_json()
        assert js["modalities"] == ["temperature"] and js["degraded"] is True
        with pytest.raises(ValueError):
            loc.fused(None, None, D)

    def test_deterministic(self, temp_setup):
        model, lib = temp_setup
        loc = Localizer(Models(temp=model), Libraries(temp=lib))
        a = loc.temp_map(lib.records[7]).values
        b = Localizer(Models(temp=model), Libraries(temp=lib)).temp_map(lib.records[7]).values
        np.testing.assert_array_equal(a, b)


class TestBaseline:
    def test_noiseless_oct15(self, clear_cfg):
        for truth in (GeoCoord(40.0, -90.0), GeoCoord(30.5, -110.2), GeoCoord(46.0, -70.0)):
            est = threshold_baseline(synth_light(truth, D, clear_cfg))
            assert abs(est.lat - truth.lat) < 1 and abs(est.lon - truth.lon) < 1

    def test_longitude_shift_equivariant(self):
        for noon in (1000.0, 1100.0):
            a = baseline_longitude(noon, D)
            b = baseline_longitude(noon + 28.0, D)
            assert a - b == pytest.approx(7.0, abs=0.01)

    def test_equinox_degenerate(self):
        # with the sun 3 degrees below the horizon as the threshold level, day
        # length stops depending on latitude a few days after the equinox
        truth = GeoCoord(38.0, -95.0)
        for date, flat in ((dt.date(2019, 9, 28), True), (D, False)):
            hours = float(day_length_hours(truth.lat, date, truth.lon, horizon=BASELINE_HORIZON_DEG))
            width = flat_region_width(hours, date, truth.lon, 1.0)
            # a 1-minute tolerance spans more than 10 degrees of latitude
            assert (width > 10) == flat, (date, width)

    def test_day_length_consistency(self, clear_cfg):
        truth = GeoCoord(42.0, -85.0)
        ev = threshold_events(synth_light(truth, D, clear_cfg))
        expect = float(day_length_hours(truth.lat, D, truth.lon, horizon=BASELINE_HORIZON_DEG))
        assert abs(ev.day_length_hours - expect) * 60 < 3

    def test_no_crossing(self):
        from lightloc.records import DailyLightRecord

        dark = DailyLightRecord(D, np.full(480, 1e-3), 3.0, GeoCoord(40, -90))
        with pytest.raises(ValueError):
            threshold_baseline(dark)


def test_result_json_round():
    m = LikelihoodMap(SMALL, np.full((3, 3), 1 / 9))
    r = LocalizationResult(D, argmax_map(m), m)
    assert r.estimate == GeoCoord(0.0, 0.0)  # documented tie-break: smallest (lat, lon)
    assert r.to_json()["estimate"] == {"lat": 0.0, "lon": 0.0}
