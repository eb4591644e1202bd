"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n>: PASS|FAIL ...`` line (visible
with ``pytest -s`` or in the ``-v`` log) before asserting. The synthetic
localization corpus (criteria 4 and 5) is built once per session and
dominates the runtime: roughly 20 minutes on one CPU core.
"""
import copy
import datetime as dt
import json
import re
import time
from pathlib import Path

import numpy as np
import pytest

from lightloc.astro import SynthConfig, night_center_astro, noise_free, synth_light, synth_temp
from lightloc.biaseval import distance_correlation, mutual_information, pearson
from lightloc.cli import DEFAULT_CONFIG, EXIT_OK, main
from lightloc.daae import DaaeModel, DaaeTrainConfig, denoise, discriminator_gap, train_daae
from lightloc.geo import GeoCoord, argmax_map, make_coarse_grid
from lightloc.localizer import Libraries, Localizer, Models
from lightloc.nn.gradcheck import check_network, quadratic_probe_loss
from lightloc.nn.layers import LayerSpec, Sequential
from lightloc.prep import log_light, night_center_xcorr
from lightloc.reflib import (
    ReferenceLibrary,
    SyntheticStationClient,
    Variogram,
    build_temp_reference,
    kriging_interpolate,
    kriging_weights,
)
from lightloc.siamese import PairPolicy, SiameseModel, SiameseTrainConfig, make_pairs, spatial_softmax, train_siamese


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return report


def circ_diff_min(a, b):
    return abs((a - b + 720.0) % 1440.0 - 720.0)


# --------------------------------------------------------------------------- #
# 1. night-center fidelity


def test_01_night_center_fidelity(verdict):
    t0 = time.perf_counter()
    grid = make_coarse_grid()
    cells = grid.centers()
    rng = np.random.default_rng(1)
    cfg = SynthConfig("none", 0.0)
    first, span = dt.date(2020, 9, 1), (dt.date(2020, 12, 15) - dt.date(2020, 9, 1)).days + 1
    diffs = []
    for k in range(500):
        c = cells[int(rng.integers(len(cells)))]
        d = first + dt.timedelta(int(rng.integers(span)))
        est = night_center_xcorr(log_light(synth_light(c, d, cfg)))
        diffs.append(circ_diff_min(est, night_center_astro(c, d)))
    diffs = np.array(diffs)
    frac = float(np.mean(diffs <= 2.0))
    elapsed = time.perf_counter() - t0
    verdict(1, frac >= 0.99 and elapsed < 60,
            f"{frac:.1%} of 500 days within 2 min (max {diffs.max():.2f} min), {elapsed:.1f} s")


# --------------------------------------------------------------------------- #
# 2. gradient correctness


def _spec(kind, **dims):
    return LayerSpec(kind, dims)


LAYER_NETS = {
    "conv1d": ([_spec("conv1d", in_channels=2, out_channels=3, kernel=5)], (4, 8, 2)),
    "batchnorm": ([_spec("conv1d", in_channels=2, out_channels=3, kernel=3), _spec("batchnorm", features=3)], (4, 8, 2)),
    "relu": ([_spec("conv1d", in_channels=2, out_channels=3, kernel=3), _spec("relu")], (4, 8, 2)),
    "maxpool": ([_spec("conv1d", in_channels=2, out_channels=3, kernel=3), _spec("maxpool", width=2)], (4, 8, 2)),
    "flatten+fc": ([_spec("flatten"), _spec("fc", fan_in=16, fan_out=5)], (4, 8, 2)),
    "dropout": ([_spec("flatten"), _spec("fc", fan_in=16, fan_out=6), _spec("dropout", p=0.3)], (4, 8, 2)),
    "sigmoid": ([_spec("flatten"), _spec("fc", fan_in=16, fan_out=4), _spec("sigmoid")], (4, 8, 2)),
}


def _gradcheck(net, shape, seed):
    x = np.random.default_rng(seed).standard_normal(shape)
    out_shape = net.forward(x, train=True, rng=np.random.default_rng(0)).shape
    errors, _ = check_network(net, x, quadratic_probe_loss(out_shape, seed=seed + 1), n_checks=6)
    return max(errors.values())


def test_02_gradient_correctness(verdict):
    t0 = time.perf_counter()
    worst = {}
    for name, (specs, shape) in LAYER_NETS.items():
        worst[name] = _gradcheck(Sequential(specs, seed=7), shape, 1)
    light = SiameseModel.create("light", seed=3)
    worst["siamese light"] = _gradcheck(light.net, (2, light.window_len, 1), 2)
    temp = SiameseModel.create("temperature", seed=3)
    worst["siamese temperature"] = _gradcheck(temp.net, (4, temp.window_len, 1), 3)
    daae = DaaeModel(seed=3)
    worst["daae encoder"] = _gradcheck(daae.encoder, (4, 480), 4)
    worst["daae decoder"] = _gradcheck(daae.decoder, (4, 50), 5)
    worst["daae discriminator"] = _gradcheck(daae.discriminator, (4, 50), 6)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    verdict(2, max(worst.values()) < 1e-4 and elapsed < 120,
            f"max relative error {worst[top]:.2e} ({top}) over {len(worst)} networks, {elapsed:.1f} s")


# --------------------------------------------------------------------------- #
# 3. spatial softmax contract


def test_03_spatial_softmax(verdict):
    p = spatial_softmax(np.array([0.0, 2.0]), 1.0)
    worked = abs(p[0] - 1.0 / (1.0 + np.exp(-2.0))) <= 1e-9
    rng = np.random.default_rng(3)
    sums_ok, mono_ok = True, True
    for _ in range(200):
        phi = rng.uniform(0, 5, int(rng.integers(2, 50)))
        q = spatial_softmax(phi, float(rng.uniform(0.05, 3)))
        sums_ok &= abs(q.sum() - 1.0) <= 1e-12
        order = np.argsort(phi, kind="stable")
        mono_ok &= bool(np.all(np.diff(q[order]) <= 0))
    verdict(3, worked and sums_ok and mono_ok,
            f"p1 = {p[0]:.12f}, normalization {'ok' if sums_ok else 'broken'}, "
            f"monotone {'ok' if mono_ok else 'broken'}")


# --------------------------------------------------------------------------- #
# 4 + 5. synthetic corpus

N_SITES = 300
LIGHT_PAIRS, LIGHT_EPOCHS = 6000, 3
TEMP_PAIRS, TEMP_EPOCHS = 4000, 3
N_TEST, N_EQUINOX = 300, 100
YEARS = (2018, 2019, 2020)
EQUINOX = [dt.date(2020, 9, 15) + dt.timedelta(i) for i in range(15)]
# Clear-sky light and noisy temperature (the per-record temperature noise is
# active for every noise kind other than "none").
CORPUS_CFG = SynthConfig("cloud-attenuation", 0.0, rng_seed=1, weather_seed=1)


def season(year):
    return [dt.date(year, 9, 1) + dt.timedelta(i) for i in range(106)]


@pytest.fixture(scope="session")
def synthetic_run():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    sites = [GeoCoord(float(rng.uniform(27.5, 47.5)), float(rng.uniform(-121.5, -66.5))) for _ in range(N_SITES)]
    lib = ReferenceLibrary("light")
    for y in YEARS[:2]:
        for i, s in enumerate(sites):
            for d in season(y):
                lib.add(log_light(synth_light(s, d, CORPUS_CFG, site_id=f"s{i}")))
    lib.synthesize_all()
    pairs = make_pairs(lib, PairPolicy(n_pairs=LIGHT_PAIRS, hard_fraction=0.5), seed=0)
    light, _ = train_siamese(SiameseModel.create("light", seed=0), pairs, SiameseTrainConfig(epochs=LIGHT_EPOCHS))

    grid = make_coarse_grid()
    client = SyntheticStationClient(grid.centers(), noise_free(CORPUS_CFG))
    tlib, _ = build_temp_reference(grid.centers(), [d for y in YEARS for d in season(y)], client)
    targets = [synth_temp(s, d, CORPUS_CFG, site_id=f"s{i}") for y in YEARS[:2] for i, s in enumerate(sites)
               for d in season(y)]
    tpairs = make_pairs(tlib, PairPolicy(n_pairs=TEMP_PAIRS, hard_fraction=0.5), seed=0, targets=targets)
    temp, _ = train_siamese(SiameseModel.create("temperature", seed=0), tpairs, SiameseTrainConfig(epochs=TEMP_EPOCHS))
    loc = Localizer(Models(light=light, temp=temp), Libraries(light=lib, temp=tlib))

    others = [d for d in season(YEARS[2]) if d not in EQUINOX]
    tests = [(int(rng.integers(N_SITES)), others[int(rng.integers(len(others)))]) for _ in range(N_TEST)]
    tests += [(int(rng.integers(N_SITES)), EQUINOX[int(rng.integers(len(EQUINOX)))]) for _ in range(N_EQUINOX)]
    rows, consistent = [], True
    for si, d in tests:
        s = sites[si]
        r = loc.fused(synth_light(s, d, CORPUS_CFG), synth_temp(s, d, CORPUS_CFG), d)
        consistent &= r.estimate == argmax_map(r.fused_map)
        ests = (r.estimate, argmax_map(r.light_map), r.baseline_estimate, argmax_map(r.temp_map))
        rows.append([d in EQUINOX] + [v for e in ests for v in (abs(e.lat - s.lat), abs(e.lon - s.lon))])
    # columns: equinox flag, then |dlat|, |dlon| for fused, light, baseline, temperature
    errors = np.array(rows, dtype=float)
    return {"localizer": loc, "errors": errors, "seconds": time.perf_counter() - t0, "sites": sites,
            "tests": tests, "argmax_consistent": consistent}


def test_04_longitude_equivariance(synthetic_run, verdict):
    # Noiseless targets on grid longitudes: the shift is then the only change
    # between the two records, and the 1 degree cell lattice (bilinear
    # refinement keeps maxima on coarse nodes) does not round it.
    loc = synthetic_run["localizer"]
    cfg = SynthConfig("none", 0.0, rng_seed=1, weather_seed=1)
    shifts = []
    for s, d in [(GeoCoord(40.0, -90.0), dt.date(2020, 10, 15)), (GeoCoord(35.0, -110.0), dt.date(2020, 11, 3)),
                 (GeoCoord(44.0, -80.0), dt.date(2020, 12, 1))]:
        moved = GeoCoord(s.lat, s.lon + 7.0)
        a = loc.fused(synth_light(s, d, cfg), synth_temp(s, d, cfg), d, baseline=False)
        b = loc.fused(synth_light(moved, d, cfg), synth_temp(moved, d, cfg), d, baseline=False)
        shifts.append(b.estimate.lon - a.estimate.lon)
    ok = all(abs(v - 7.0) <= 0.3 for v in shifts)
    verdict(4, ok, "fused longitude shifts " + ", ".join(f"{v:.2f}" for v in shifts) + " deg for +7 deg targets")


def test_05_synthetic_localization(synthetic_run, verdict):
    e, secs = synthetic_run["errors"], synthetic_run["seconds"]
    eq = e[:, 0] > 0
    fused_lat, fused_lon = np.median(e[~eq, 1]), np.median(e[~eq, 2])
    eq_fused, eq_light, eq_base = np.median(e[eq, 1]), np.median(e[eq, 3]), np.median(e[eq, 5])
    ok = fused_lat <= 1.0 and fused_lon <= 0.5 and eq_fused < eq_light and eq_fused < eq_base and secs < 1800
    verdict(5, ok,
            f"non-equinox fused median {fused_lat:.3f} lat / {fused_lon:.3f} lon; "
            f"Sep 15-29 latitude fused {eq_fused:.3f} vs light {eq_light:.3f} vs baseline {eq_base:.3f}; "
            f"{secs / 60:.1f} min")


def test_localization_properties(synthetic_run):
    """Corpus-median properties of the single-modality and fused pipelines."""
    e = synthetic_run["errors"]
    eq = e[:, 0] > 0
    med = np.median(e[~eq], axis=0)
    fused, light, temp = med[1:3], med[3:5], med[7:9]
    assert np.median(e[:, 7]) <= 2.0  # temperature is latitude-informative
    assert np.all(fused <= np.maximum(light, temp))
    assert np.median(e[eq, 1]) < np.median(e[eq, 5])
    assert synthetic_run["argmax_consistent"]


def test_fused_mass_concentrates_at_truth(synthetic_run):
    loc = synthetic_run["localizer"]
    cfg = SynthConfig("none", 0.0, rng_seed=1, weather_seed=1)
    truth, d = GeoCoord(40.0, -90.0), dt.date(2020, 10, 15)
    m = loc.fused(synth_light(truth, d, cfg), synth_temp(truth, d, cfg), d, baseline=False).fused_map
    lat, lon = np.meshgrid(m.grid.lats, m.grid.lons, indexing="ij")
    dist = np.maximum(np.abs(lat - truth.lat), np.abs(lon - truth.lon))
    p = m.values / m.values.sum()
    assert p[dist <= 1].sum() > p[dist > 3].sum()


@pytest.mark.xfail(reason="single-modality likelihoods are broad in latitude; see light-only accuracy below",
                   strict=False)
def test_light_mass_concentrates_at_truth(synthetic_run):
    loc = synthetic_run["localizer"]
    truth, d = GeoCoord(40.0, -90.0), dt.date(2020, 10, 15)
    m = loc.light_map(synth_light(truth, d, SynthConfig("none", 0.0)), d)
    lat, lon = np.meshgrid(m.grid.lats, m.grid.lons, indexing="ij")
    dist = np.maximum(np.abs(lat - truth.lat), np.abs(lon - truth.lon))
    assert m.values[dist <= 1].sum() > m.values[dist > 3].sum()


@pytest.mark.xfail(reason="light-only latitude error reaches 2 deg on some noiseless days", strict=False)
def test_light_only_noiseless_accuracy(synthetic_run):
    loc = synthetic_run["localizer"]
    truth = GeoCoord(40.0, -90.0)
    for d in (dt.date(2020, 9, 5), dt.date(2020, 10, 15), dt.date(2020, 11, 10), dt.date(2020, 12, 1)):
        est = argmax_map(loc.light_map(synth_light(truth, d, SynthConfig("none", 0.0)), d))
        assert abs(est.lat - truth.lat) <= 1.0 and abs(est.lon - truth.lon) <= 0.5, (d, est)


def test_monotone_degradation(synthetic_run):
    """Doubling the cloud level does not lower the corpus-median fused error."""
    loc, sites = synthetic_run["localizer"], synthetic_run["sites"]
    days = synthetic_run["tests"][:200]
    med = []
    for level in (0.5, 1.0):
        cfg = SynthConfig("cloud-attenuation", level, rng_seed=3, weather_seed=1)
        err = []
        for si, d in days:
            s = sites[si]
            est = loc.fused(synth_light(s, d, cfg), synth_temp(s, d, cfg), d, baseline=False).estimate
            err.append((abs(est.lat - s.lat), abs(est.lon - s.lon)))
        med.append(np.median(err, axis=0))
    assert np.all(med[1] >= med[0]), med


# --------------------------------------------------------------------------- #
# 6. DAAE


DAAE_LEVEL = 1.0  # cloud level the denoiser is tuned for; see the mild-noise figure in the report line


def _daae_days(n, seed, level=DAAE_LEVEL):
    cfg = SynthConfig("cloud-attenuation", level, rng_seed=seed)
    rng = np.random.default_rng(seed)
    noisy, clean = [], []
    for _ in range(n):
        c = GeoCoord(float(rng.uniform(27.5, 47.5)), float(rng.uniform(-121.5, -66.5)))
        d = dt.date(2019, 9, 1) + dt.timedelta(int(rng.integers(106)))
        noisy.append(log_light(synth_light(c, d, cfg)))
        clean.append(log_light(synth_light(c, d, noise_free(cfg))).samples)
    return noisy, np.array(clean)


def _mse_reduction(model, noisy, clean):
    before = np.mean([np.mean((r.samples - c) ** 2) for r, c in zip(noisy, clean)])
    after = np.mean([np.mean((denoise(model, r).samples - c) ** 2) for r, c in zip(noisy, clean)])
    return before, after, 1.0 - after / before


@pytest.fixture(scope="module")
def daae_run():
    noisy, clean = _daae_days(4000, 11)  # the pipeline's default max_days
    model, _ = train_daae(np.array([r.samples for r in noisy]), clean, DaaeTrainConfig(epochs=20, seed=0))
    held_noisy, held_clean = _daae_days(500, 12)
    return model, held_noisy, held_clean


def test_06_daae_effectiveness(daae_run, verdict):
    model, noisy, clean = daae_run
    before, after, reduction = _mse_reduction(model, noisy, clean)
    # same model on milder clouds, reported for context only
    mild = _mse_reduction(model, *_daae_days(500, 13, level=0.5))
    verdict(6, reduction >= 0.5,
            f"held-out MSE {before:.4f} -> {after:.4f} ({reduction:.1%} reduction, 500 days, level {DAAE_LEVEL}); "
            f"level 0.5: {mild[0]:.4f} -> {mild[1]:.4f} ({mild[2]:.1%})")


def test_daae_latent_alignment(daae_run):
    model, noisy, clean = daae_run
    assert discriminator_gap(model, np.array([r.samples for r in noisy]), clean) < 0.2


def _night_leaks(model, noisy, clean):
    """Per record, the share of true-dark samples the denoiser lifts into the
    upper three quarters of the day's range."""
    out = []
    for r, c in zip(noisy, clean):
        d = denoise(model, r).samples
        dark = c <= c.min()
        level = d.min() + 0.25 * (d.max() - d.min())
        out.append(float(np.mean(d[dark] >= level)))
    return np.array(out)


def test_daae_preserves_night(daae_run):
    leaks = _night_leaks(*daae_run)
    assert np.mean(leaks <= 0.05) >= 0.95


@pytest.mark.xfail(reason="dawn and dusk edges are blurred by a few samples in most records", strict=False)
def test_daae_preserves_every_night_sample(daae_run):
    leaks = _night_leaks(*daae_run)
    assert np.mean(leaks == 0) >= 0.95


# --------------------------------------------------------------------------- #
# 7. Kriging


def test_07_kriging(verdict):
    rng = np.random.default_rng(7)
    lat = rng.uniform(30, 45, 25)
    lon = rng.uniform(-110, -80, 25)
    field = lambda a, o: 10.0 + 0.4 * (a - 37.0) - 0.15 * (o + 95.0)  # noqa: E731
    pts = [(GeoCoord(float(a), float(o)), float(field(a, o) + rng.normal(0, 2))) for a, o in zip(lat, lon)]
    exact = max(abs(kriging_interpolate(pts, c, nugget=0.0) - v) for c, v in pts)

    ring = [(GeoCoord(37 + 2 * np.sin(t), -95 + 2 * np.cos(t)), float(field(37 + 2 * np.sin(t), -95 + 2 * np.cos(t))))
            for t in np.linspace(0, 2 * np.pi, 12, endpoint=False)]
    linear = max(abs(kriging_interpolate(ring, GeoCoord(a, o)) - field(a, o))
                 for a, o in [(37.0, -95.0), (37.5, -94.2), (36.3, -95.8)])

    vg = Variogram(nugget=0.0, sill=4.0, range_km=800.0)
    wsum = max(abs(kriging_weights(lat, lon, GeoCoord(float(a), float(o)), vg).sum() - 1.0)
               for a, o in zip(rng.uniform(30, 45, 20), rng.uniform(-110, -80, 20)))
    verdict(7, exact < 1e-6 and linear < 0.1 and wsum <= 1e-10,
            f"exactness {exact:.1e}, linear-field error {linear:.3f} C, |sum(w) - 1| {wsum:.1e}")


# --------------------------------------------------------------------------- #
# 8. bias metrics


def test_08_bias_metrics(verdict):
    rng = np.random.default_rng(8)
    x = rng.standard_normal(500)
    r_lin = pearson(x, 3 * x + 1)
    d_lin = distance_correlation(x, 3 * x + 1)
    d_ind = distance_correlation(rng.standard_normal(2000), rng.standard_normal(2000))
    rho = 0.9
    z = rng.multivariate_normal([0, 0], [[1, rho], [rho, 1]], size=5000)
    mi = mutual_information(z[:, 0], z[:, 1], seed=0)
    analytic = -0.5 * np.log(1 - rho ** 2)
    ok = abs(r_lin - 1) <= 1e-12 and abs(d_lin - 1) <= 1e-9 and d_ind < 0.1 and abs(mi - analytic) <= 0.1
    verdict(8, ok, f"pearson {r_lin!r}, dCor linear {d_lin:.12f}, dCor independent {d_ind:.4f}, "
                   f"KSG {mi:.4f} vs {analytic:.4f} nats")


# --------------------------------------------------------------------------- #
# 9 + 10. CLI


def _config(root: Path, **over) -> Path:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    cfg["synth"].update(n_sites=3, season_start="10-01", season_end="10-05")
    cfg["training"]["light"].update(n_pairs=128, epochs=1)
    cfg["training"]["temp"].update(n_pairs=128, epochs=1)
    for section, values in over.items():
        cfg[section].update(values)
    root.mkdir(parents=True, exist_ok=True)
    path = root / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def _pipeline(root: Path) -> dict:
    cfg = _config(root)
    for argv in (["synth"], ["ingest"], ["build-reflib"], ["train", "--stage", "light"],
                 ["train", "--stage", "temp"], ["localize", "--limit", "10"]):
        assert main(["--config", str(cfg), *argv]) == EXIT_OK, argv
    res = root / "outputs" / "results"
    return {str(p.relative_to(res)): p.read_bytes() for p in sorted(res.rglob("*.json"))}


def test_09_determinism(tmp_path, verdict):
    one = _pipeline(tmp_path / "a")
    two = _pipeline(tmp_path / "b")
    same = one == two and len(one) == 10
    verdict(9, same, f"{len(one)} result JSONs per run, "
                     f"{'byte-identical' if same else 'DIFFERENT'} across two seeded runs")


def test_10_report_formats(tmp_path, verdict):
    root = tmp_path / "rep"
    cfg = _config(root)
    assert main(["--config", str(cfg), "synth"]) == EXIT_OK
    truth = json.loads((root / "corpus" / "truth.json").read_text())
    rng = np.random.default_rng(10)
    res = root / "results"
    for site in truth["sites"]:
        for k in range(40):
            d = dt.date(2020, 9, 1) + dt.timedelta(k * 2)
            e = rng.normal(0, 1, 4)
            doc = {"date": d.isoformat(), "site_id": site["site_id"],
                   "estimate": {"lat": site["lat"] + e[0], "lon": site["lon"] + e[1]},
                   "baseline_estimate": {"lat": site["lat"] + e[2], "lon": site["lon"] + e[3]}}
            p = res / site["site_id"] / f"{d}.json"
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(json.dumps(doc))
    report = root / "report"
    assert main(["--config", str(cfg), "evaluate", "--results", str(res), "--report-dir", str(report)]) == EXIT_OK

    table = (report / "bias_table.txt").read_text().splitlines()
    pair = r"\(-?\d+\.\d{3}, -?\d+\.\d{3}\)"
    header_ok = all(t in table[0] for t in ("Pearson Correlation", "Distance Correlation", "Mutual Information"))
    rows = {line.split("  ")[0]: re.findall(pair, line) for line in table[2:] if line.strip()}
    rows_ok = len(rows.get("Our model", [])) == 3 and len(rows.get("Threshold baseline", [])) == 3
    overall = (report / "overall.txt").read_text()
    overall_ok = re.search(r"\((\d+\.\d{3}), (\d+\.\d{3})\)", overall) is not None
    bins = (report / "biweekly.csv").read_text().splitlines()
    equinox_ok = any(line.startswith("2020-09-15,2020-09-28,") for line in bins)
    verdict(10, header_ok and rows_ok and overall_ok and equinox_ok,
            f"bias table {len(rows)} methods x 3 metrics x (lat, lon); overall '{overall.strip()}'; "
            f"biweekly bins {len(bins) - 1} incl. equinox {'yes' if equinox_ok else 'no'}")
