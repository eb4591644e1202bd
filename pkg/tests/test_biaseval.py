import datetime as dt
import warnings

import numpy as np
import pytest

from lightloc.biaseval import (
    DependenceWarning,
    ErrorSample,
    bias_csv,
    bias_report,
    biweekly_mae,
    cdf_quantile,
    distance_correlation,
    error_cdf,
    format_bias_table,
    format_overall,
    isolation_score,
    mutual_information,
    overall_mae,
    pearson,
)
from lightloc.geo import GeoCoord

T = GeoCoord(40.0, -90.0)


def dcor_oracle(x, y):
    """Distance correlation via the O(n^2) unbiased-free textbook definition with explicit loops."""
    n = len(x)
    a = np.array([[abs(x[i] - x[j]) for j in range(n)] for i in range(n)])
    b = np.array([[abs(y[i] - y[j]) for j in range(n)] for i in range(n)])
    A = a - a.mean(0) - a.mean(1)[:, None] + a.mean()
    B = b - b.mean(0) - b.mean(1)[:, None] + b.mean()
    return np.sqrt((A * B).mean() / np.sqrt((A * A).mean() * (B * B).mean()))


class TestIsolation:
    def test_cases(self):
        assert isolation_score(T, [T] * 6) == 0
        assert isolation_score(T, [GeoCoord(43.0, -86.0)], k=1) == pytest.approx(5.0)
        ring = [GeoCoord(40 + 2 * np.sin(a), -90 + 2 * np.cos(a)) for a in np.linspace(0, 2 * np.pi, 5, endpoint=False)]
        assert isolation_score(T, ring + [GeoCoord(20.0, -120.0)], k=5) == pytest.approx(2.0)

    def test_few_refs(self):
        with pytest.warns(DependenceWarning):
            assert isolation_score(T, np.array([[41.0, -90.0], [40.0, -88.0]]), k=5) == pytest.approx(1.5)
        with pytest.raises(ValueError):
            isolation_score(T, [], k=1)


class TestPearson:
    def test_linear(self, rng):
        x = rng.normal(size=100)
        assert pearson(x, 3 * x + 1) == pytest.approx(1.0)
        assert pearson(x, -x) == pytest.approx(-1.0)

    def test_independent(self):
        r = np.random.default_rng(7)
        assert abs(pearson(r.uniform(size=10000), r.uniform(size=10000))) < 0.05

    def test_matches_numpy(self, rng):
        x, y = rng.normal(size=50), rng.normal(size=50)
        assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            pearson([1, 1, 1], [1, 2, 3])
        with pytest.raises(ValueError):
            pearson([1], [2])


class TestDistanceCorrelation:
    def test_linear(self, rng):
        x = rng.normal(size=200)
        assert distance_correlation(x, -2.5 * x + 4) == pytest.approx(1.0, abs=1e-9)

    def test_independent(self):
        r = np.random.default_rng(11)
        assert distance_correlation(r.uniform(size=2000), r.uniform(size=2000)) < 0.1

    def test_nonlinear(self):
        x = np.linspace(-1, 1, 401)
        assert abs(pearson(x, x ** 2)) < 1e-9
        assert distance_correlation(x, x ** 2) > 0.3

    def test_oracle(self, rng):
        x, y = rng.normal(size=40), rng.exponential(size=40)
        assert distance_correlation(x, y) == pytest.approx(dcor_oracle(x, y), rel=1e-10)

    def test_constant(self):
        with pytest.warns(DependenceWarning):
            assert distance_correlation(np.ones(10), np.arange(10.0)) == 0.0


class TestMutualInformation:
    def test_independent(self):
        r = np.random.default_rng(3)
        assert mutual_information(r.uniform(size=5000), r.uniform(size=5000)) < 0.05

    def test_gaussian(self):
        rho = 0.9
        r = np.random.default_rng(5)
        z = r.multivariate_normal([0, 0], [[1, rho], [rho, 1]], size=5000)
        truth = -0.5 * np.log(1 - rho ** 2)
        assert abs(mutual_information(z[:, 0], z[:, 1]) - truth) < 0.1

    def test_identity_large(self):
        x = np.random.default_rng(2).normal(size=5000)
        assert mutual_information(x, x) > 2

    def test_duplicates_and_clamp(self):
        r = np.random.default_rng(9)
        x = r.integers(0, 3, 300).astype(float)
        y = r.integers(0, 3, 300).astype(float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DependenceWarning)
            assert mutual_information(x, y) >= 0

    def test_errors(self):
        with pytest.raises(ValueError):
            mutual_information(np.arange(10.0), np.arange(10.0))
        with pytest.raises(ValueError):
            mutual_information(np.arange(60.0), np.arange(60.0), k_neighbors=0)


def test_affine_invariance(rng):
    x = rng.normal(size=800)
    y = x + rng.normal(size=800)
    xs, ys = 4 * x - 3, 0.2 * y + 7
    assert pearson(xs, ys) == pytest.approx(pearson(x, y), abs=1e-12)
    assert distance_correlation(xs, ys) == pytest.approx(distance_correlation(x, y), abs=1e-9)
    assert abs(mutual_information(xs, ys) - mutual_information(x, y)) < 0.05


def sample(date, err_lat, err_lon, iso=1.0):
    return ErrorSample(date, T, GeoCoord(T.lat + err_lat, T.lon + err_lon), iso)


class TestTables:
    def test_single_bin(self):
        rows = biweekly_mae([sample(dt.date(2020, 9, 3), 1.0, 0.5)])
        assert len(rows) == 1
        r = rows[0]
        assert (r.mae_lat, r.mae_lon, r.n) == (pytest.approx(1.0), pytest.approx(0.5), 1)
        assert r.start == dt.date(2020, 9, 1) and r.end == dt.date(2020, 9, 14)

    def test_partition(self, rng):
        days = [dt.date(2020, 9, 1) + dt.timedelta(int(k)) for k in rng.integers(0, 105, 200)]
        rows = biweekly_mae([sample(d, 0.0, 0.0) for d in days])
        assert sum(r.n for r in rows) == 200
        for a, b in zip(rows, rows[1:]):
            assert b.start == a.end + dt.timedelta(1)
        assert all(r.mae_lat == 0 for r in rows if r.n)

    def test_empty_bin(self):
        rows = biweekly_mae([sample(dt.date(2020, 9, 2), 1, 1), sample(dt.date(2020, 10, 1), 1, 1)])
        assert [r.n for r in rows] == [1, 0, 1]

    def test_cdf(self, rng):
        samples = [sample(dt.date(2020, 10, 1), float(e), 0.1) for e in rng.uniform(0, 3, 101)]
        cdf = error_cdf(samples)
        errs, frac = cdf["lat"]
        assert frac[-1] == 1.0 and np.all(np.diff(errs) >= 0)
        assert cdf_quantile(errs, frac, 0.5) == pytest.approx(np.median([s.abs_err_lat for s in samples]))
        one = error_cdf([sample(dt.date(2020, 10, 1), 0.7, 0.1)])["lat"]
        assert one[1].tolist() == [1.0] and one[0][0] == pytest.approx(0.7)

    def test_overall_format(self):
        mae = overall_mae([sample(dt.date(2020, 10, 1), 1.416, 0.393)])
        text = format_overall(mae)
        assert "(1.416, 0.393)" in text


@pytest.mark.filterwarnings("ignore::lightloc.biaseval.DependenceWarning")
class TestBiasReport:
    def _samples(self, rng, n=300, dependent=False):
        iso = rng.uniform(0.2, 3.0, n)
        err = iso.copy() if dependent else rng.permutation(rng.exponential(1.0, n))
        days = [dt.date(2020, 9, 1) + dt.timedelta(int(k)) for k in rng.integers(0, 100, n)]
        return [ErrorSample(d, T, GeoCoord(T.lat + e, T.lon - e / 2), i) for d, e, i in zip(days, err, iso)]

    def test_shuffle_null(self, rng):
        rep = bias_report(self._samples(rng, 1000))
        assert all(abs(v) < 0.1 for v in rep["pearson"])
        assert all(v < 0.1 for v in rep["distance_correlation"])
        assert all(v < 0.05 for v in rep["mutual_information"])

    def test_fully_dependent(self, rng):
        rep = bias_report(self._samples(rng, dependent=True))
        assert rep["pearson"][0] == pytest.approx(1.0)
        assert rep["distance_correlation"][0] == pytest.approx(1.0)

    def test_permutation_invariant(self, rng):
        s = self._samples(rng)
        assert bias_report(s) == bias_report(s[::-1])

    def test_table_layout(self, rng):
        rep = bias_report(self._samples(rng))
        text = format_bias_table({"Our model": rep, "Threshold baseline": rep})
        lines = text.strip().splitlines()
        assert len(lines) == 4
        assert lines[0].startswith("Method") and "Mutual Information (latitude, longitude)" in lines[0]
        assert lines[2].count("(") == 3
        csv_text = bias_csv({"Our model": rep})
        assert len(csv_text.strip().splitlines()) == 1 + 3

    def test_too_few(self, rng):
        with pytest.raises(ValueError):
            bias_report(self._samples(rng, 49))
