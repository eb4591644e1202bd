"""One synthetic day: night center, threshold baseline, and why equinox latitude is hard.

    python demos/01_one_day.py
"""
import datetime as dt

from lightloc.astro import SynthConfig, day_length_hours, night_center_astro, synth_light
from lightloc.geo import GeoCoord
from lightloc.localizer import flat_region_width, threshold_baseline, threshold_events
from lightloc.prep import log_light, night_center_xcorr

site = GeoCoord(40.0, -90.0)
clear = SynthConfig("none", 0.0)
cloudy = SynthConfig("cloud-attenuation", 1.0, rng_seed=4)

for date in (dt.date(2020, 10, 15), dt.date(2020, 9, 28)):
    rec = synth_light(site, date, clear)
    ev = threshold_events(rec)
    print(f"{date}: night center xcorr {night_center_xcorr(log_light(rec)):7.2f} min UTC, "
          f"astronomical {night_center_astro(site, date):7.2f}")
    print(f"  threshold day length {ev.day_length_hours:.3f} h -> baseline {threshold_baseline(rec, date)}")
    width = flat_region_width(ev.day_length_hours, date, site.lon, tol_min=1.0)
    print(f"  latitudes whose day length is within 1 min of it span {width:.1f} deg")

noisy = synth_light(site, dt.date(2020, 10, 15), cloudy)
print("cloudy Oct 15 baseline:", threshold_baseline(noisy, dt.date(2020, 10, 15)))
print(f"day length at 30N vs 45N on Sep 28: {day_length_hours(30, dt.date(2020, 9, 28)):.3f} h, "
      f"{day_length_hours(45, dt.date(2020, 9, 28)):.3f} h")
