import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lightloc.geo import (GeoCoord, LikelihoodMap, SearchGrid, argmax_map, coord_distance_deg, fuse_maps,
                          make_coarse_grid, refine_map, uniform_map)


def random_map(seed, grid=None):
    grid = grid or make_coarse_grid()
    return LikelihoodMap(grid, np.random.default_rng(seed).random(grid.shape)).normalized()


class TestGeoCoord:
    def test_bounds(self):
        with pytest.raises(ValueError):
            GeoCoord(91, 0)
        with pytest.raises(ValueError):
            GeoCoord(0, -181)
        with pytest.raises(ValueError):
            GeoCoord(float("nan"), 0)

    def test_distance(self):
        assert coord_distance_deg(GeoCoord(40, -100), GeoCoord(40, -100)) == (0, 0)
        d = coord_distance_deg(GeoCoord(40.3, -100.2), GeoCoord(40, -100))
        assert d == pytest.approx((0.3, 0.2))
        assert coord_distance_deg(GeoCoord(27, -66), GeoCoord(48, -122)) == (21, 56)


class TestGrid:
    def test_coarse_grid(self):
        g = make_coarse_grid()
        assert g.shape == (22, 57) and g.size == 1254
        assert g.center(0, 0).as_tuple() == (27, -122)
        assert g.center(21, 56).as_tuple() == (48, -66)
        assert len(g.centers()) == 1254 and g.centers()[1].as_tuple() == (27, -121)

    def test_invalid_grid(self):
        with pytest.raises(ValueError):
            SearchGrid(0, 0, 3, 0, 1, 3)
        with pytest.raises(ValueError):
            SearchGrid(0, 1, 0, 0, 1, 3)
        with pytest.raises(IndexError):
            make_coarse_grid().center(22, 0)


class TestMaps:
    def test_validation(self):
        g = make_coarse_grid()
        with pytest.raises(ValueError):
            LikelihoodMap(g, -np.ones(g.shape))
        with pytest.raises(ValueError):
            LikelihoodMap(g, np.zeros(g.shape)).normalized()

    def test_refine_shape_and_constant(self):
        r = refine_map(uniform_map(make_coarse_grid()), 0.1)
        assert r.grid.shape == ((22 - 1) * 10 + 1, (57 - 1) * 10 + 1)
        assert np.ptp(r.values) < 1e-15
        assert r.total == pytest.approx(1.0, abs=1e-9)

    def test_refine_reproduces_nodes(self):
        m = random_map(3)
        r = refine_map(m, 0.1)
        nodes = r.values[::10, ::10]
        scale = nodes.sum() / m.values.sum()
        np.testing.assert_allclose(nodes, m.values * scale, rtol=0, atol=1e-12)

    def test_refine_single_peak(self):
        g = make_coarse_grid()
        v = np.full(g.shape, 0.01)
        v[7, 30] = 1.0
        est = argmax_map(refine_map(LikelihoodMap(g, v), 0.1))
        assert abs(est.lat - 34) <= 0.5 and abs(est.lon - (-92)) <= 0.5

    @pytest.mark.parametrize("step", [0, -0.1, 1.5, 0.3])
    def test_refine_bad_step(self, step):
        with pytest.raises(ValueError):
            refine_map(uniform_map(make_coarse_grid()), step)

    def test_argmax_ties(self):
        g = make_coarse_grid()
        assert argmax_map(uniform_map(g)).as_tuple() == (27, -122)
        v = np.zeros(g.shape)
        v[3, 22] = v[13, 32] = 1.0  # (30, -100) and (40, -90)
        assert argmax_map(LikelihoodMap(g, v)).as_tuple() == (30, -100)

    def test_argmax_one_hot_and_scale(self):
        g = make_coarse_grid()
        v = np.zeros(g.shape)
        v[5, 9] = 2.0
        m = LikelihoodMap(g, v)
        assert argmax_map(m).as_tuple() == (32, -113)
        assert argmax_map(LikelihoodMap(g, v * 1e-30)) == argmax_map(m)

    def test_fuse(self):
        g = make_coarse_grid()
        b = random_map(5)
        np.testing.assert_allclose(fuse_maps(uniform_map(g), b).values, b.values, atol=1e-15)
        lat_band = np.zeros(g.shape)
        lat_band[10, :] = 1
        lon_band = np.zeros(g.shape)
        lon_band[:, 40] = 1
        est = argmax_map(fuse_maps(LikelihoodMap(g, lat_band + 1e-3), LikelihoodMap(g, lon_band + 1e-3)))
        assert est.as_tuple() == (37, -82)

    def test_fuse_grid_mismatch(self):
        a = uniform_map(make_coarse_grid())
        b = uniform_map(SearchGrid(27, 1, 22, -122, 1, 56))
        with pytest.raises(ValueError):
            fuse_maps(a, b)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 10_000), st.integers(0, 10_000))
    def test_fuse_algebra(self, s1, s2, s3):
        g = SearchGrid(0, 1, 4, 0, 1, 5)
        a, b, c = random_map(s1, g), random_map(s2, g), random_map(s3, g)
        ab = fuse_maps(a, b)
        assert ab.total == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(ab.values, fuse_maps(b, a).values, atol=1e-9)
        np.testing.assert_allclose(fuse_maps(ab, c).values, fuse_maps(a, fuse_maps(b, c)).values, atol=1e-9)
