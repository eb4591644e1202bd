import datetime as dt

import numpy as np
import pytest

from lightloc.astro import SynthConfig
from lightloc.geo import GeoCoord


@pytest.fixture
def clear_cfg():
    return SynthConfig("none", 0.0, rng_seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


OCT15 = dt.date(2020, 10, 15)
MID = GeoCoord(40.0, -90.0)
