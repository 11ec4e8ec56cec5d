"""Shared builders for synthetic observations and series."""
import datetime as dt
import math

import numpy as np
import pytest

from cmfda.core import BAND_ORDER, Band, Observation, PixelSeries, Reliability


def harmonic_value(coeffs, doy):
    """Direct evaluation of the seasonal signal, independent of the
    library's design-vector code."""
    w = 2.0 * math.pi * doy / 366.0
    return (
        coeffs[0]
        + coeffs[1] * math.cos(w)
        + coeffs[2] * math.sin(w)
        + coeffs[3] * math.cos(2 * w)
        + coeffs[4] * math.sin(2 * w)
    )


DEFAULT_VALUES = {
    Band.RED: 0.08,
    Band.NIR: 0.42,
    Band.BLUE: 0.05,
    Band.MIR: 0.18,
    Band.NDVI: 0.68,
    Band.EVI: 0.55,
}


def make_obs(
    date,
    values=None,
    reliability=Reliability.GOOD,
    doy_lag=0,
):
    base = dict(DEFAULT_VALUES)
    if values:
        base.update(values)
    comp = date + dt.timedelta(days=doy_lag)
    return Observation(
        nominal_date=date,
        composite_doy=comp.timetuple().tm_yday,
        values=base,
        reliability=reliability,
    )


def nominal_dates(start, end):
    dates = []
    d = start
    while d <= end:
        dates.append(d)
        d += dt.timedelta(days=16)
    return dates


def make_series(
    start=dt.date(2003, 1, 1),
    end=dt.date(2006, 12, 31),
    band_coeffs=None,
    reliability_fn=None,
    value_fn=None,
    pixel_id="px",
    col=0,
    row=0,
):
    """Series whose clean values follow per-band harmonics.

    value_fn(band, date, clean) may override individual values;
    reliability_fn(date) may override the quality flag.
    """
    coeffs = {band: (DEFAULT_VALUES[band], 0, 0, 0, 0) for band in BAND_ORDER}
    if band_coeffs:
        coeffs.update(band_coeffs)
    observations = []
    for date in nominal_dates(start, end):
        doy = date.timetuple().tm_yday
        values = {}
        for band in BAND_ORDER:
            clean = harmonic_value(coeffs[band], doy)
            if value_fn:
                clean = value_fn(band, date, clean)
            values[band] = clean
        rel = reliability_fn(date) if reliability_fn else Reliability.GOOD
        observations.append(
            Observation(
                nominal_date=date,
                composite_doy=doy,
                values=values,
                reliability=rel,
            )
        )
    return PixelSeries(pixel_id, col, row, tuple(observations))


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)
