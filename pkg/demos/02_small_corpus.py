"""A desk-sized version of the synthetic experiment through the Python API.

Thirty sites, two training seasons, a few minutes on one core. Prints the
per-day errors of the fused, light-only and threshold estimates.

    python demos/02_small_corpus.py
"""
import datetime as dt

import numpy as np

from lightloc.astro import SynthConfig, noise_free, synth_light, synth_temp
from lightloc.geo import GeoCoord, argmax_map, make_coarse_grid
from lightloc.localizer import Libraries, Localizer, Models
from lightloc.prep import log_light
from lightloc.reflib import ReferenceLibrary, SyntheticStationClient, build_temp_reference
from lightloc.siamese import PairPolicy, SiameseModel, SiameseTrainConfig, make_pairs, train_siamese

cfg = SynthConfig("cloud-attenuation", 0.0, rng_seed=1, weather_seed=1)
rng = np.random.default_rng(0)
sites = [GeoCoord(float(rng.uniform(27.5, 47.5)), float(rng.uniform(-121.5, -66.5))) for _ in range(30)]
season = lambda y: [dt.date(y, 9, 1) + dt.timedelta(i) for i in range(106)]  # noqa: E731

lib = ReferenceLibrary("light")
for y in (2018, 2019):
    for i, s in enumerate(sites):
        for d in season(y):
            lib.add(log_light(synth_light(s, d, cfg, site_id=f"s{i}")))
lib.synthesize_all()
print(f"light library: {lib.n_parents} records, {len(lib)} entries after longitude synthesis")
light, hist = train_siamese(SiameseModel.create("light"), make_pairs(lib, PairPolicy(n_pairs=1500), seed=0),
                            SiameseTrainConfig(epochs=2))
print("light loss per epoch", np.round(hist, 4), "sigma", round(light.sigma, 4))

grid = make_coarse_grid()
tlib, _ = build_temp_reference(grid.centers(), [d for y in (2018, 2019, 2020) for d in season(y)],
                               SyntheticStationClient(grid.centers(), noise_free(cfg)))
targets = [synth_temp(s, d, cfg) for s in sites for d in season(2018)]
temp, hist = train_siamese(SiameseModel.create("temperature"),
                           make_pairs(tlib, PairPolicy(n_pairs=1000), seed=0, targets=targets),
                           SiameseTrainConfig(epochs=2))
print("temperature loss per epoch", np.round(hist, 4))

loc = Localizer(Models(light=light, temp=temp), Libraries(light=lib, temp=tlib))
print(f"{'date':10} {'truth':>14} {'fused':>14} {'light':>14} {'baseline':>14}")
fmt = lambda c: f"({c.lat:5.1f},{c.lon:6.1f})"  # noqa: E731
for k in range(10):
    s, d = sites[k], dt.date(2020, 9, 10) + dt.timedelta(9 * k)
    r = loc.fused(synth_light(s, d, cfg), synth_temp(s, d, cfg), d)
    print(d, fmt(s), fmt(r.estimate), fmt(argmax_map(r.light_map)), fmt(r.baseline_estimate))
